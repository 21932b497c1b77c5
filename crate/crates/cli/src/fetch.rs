use std::io::{Read, Write};
use std::path::{Component, Path, PathBuf};

use sha2::{Digest, Sha256};
use wastewise_core::dataset::load_corpus;
use wastewise_core::ClassLabel;

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error("download of {url} failed: {reason}")]
    NetworkFailure { url: String, reason: String },
    #[error("archive sha256 is {actual}, expected {expected}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("cannot extract archive: {0}")]
    ExtractFailure(String),
}

pub fn download(url: &str) -> Result<Vec<u8>, FetchError> {
    let fail = |reason: String| FetchError::NetworkFailure { url: url.into(), reason };
    let client = reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_secs(600))
        .build()
        .map_err(|e| fail(e.to_string()))?;
    let resp = client.get(url).send().map_err(|e| fail(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(fail(format!("HTTP {}", resp.status())));
    }
    Ok(resp.bytes().map_err(|e| fail(e.to_string()))?.to_vec())
}

pub fn verify(bytes: &[u8], expected: Option<&str>) -> Result<String, FetchError> {
    let actual = hex::encode(Sha256::digest(bytes));
    match expected {
        Some(e) if !e.eq_ignore_ascii_case(&actual) => {
            Err(FetchError::ChecksumMismatch { expected: e.to_lowercase(), actual })
        }
        _ => Ok(actual),
    }
}

/// Maps an archive entry to `<class>/<rest>`, dropping everything before
/// the first class-named directory. Metadata folders and dotfiles map to
/// `None`.
fn target_path(entry: &Path) -> Option<PathBuf> {
    let parts: Vec<&str> = entry
        .components()
        .map(|c| match c {
            Component::Normal(s) => s.to_str(),
            _ => None,
        })
        .collect::<Option<_>>()?;
    if parts.iter().any(|p| *p == "__MACOSX" || p.starts_with('.')) {
        return None;
    }
    let start = parts[..parts.len().saturating_sub(1)].iter().position(|p| p.parse::<ClassLabel>().is_ok())?;
    Some(parts[start..].iter().collect())
}

/// Extracts image entries into `dest/<class>/`; returns the number written.
pub fn extract(archive: &[u8], dest: &Path) -> Result<usize, FetchError> {
    let err = |e: &dyn std::fmt::Display| FetchError::ExtractFailure(e.to_string());
    let mut zip = zip::ZipArchive::new(std::io::Cursor::new(archive)).map_err(|e| err(&e))?;
    let mut written = 0;
    for i in 0..zip.len() {
        let mut file = zip.by_index(i).map_err(|e| err(&e))?;
        if !file.is_file() {
            continue;
        }
        let Some(rel) = file.enclosed_name().as_deref().and_then(target_path) else { continue };
        let out = dest.join(rel);
        std::fs::create_dir_all(out.parent().expect("class dir")).map_err(|e| err(&e))?;
        let mut buf = Vec::with_capacity(file.size() as usize);
        file.read_to_end(&mut buf).map_err(|e| err(&e))?;
        std::fs::File::create(&out).and_then(|mut f| f.write_all(&buf)).map_err(|e| err(&format!("{}: {e}", out.display())))?;
        written += 1;
    }
    if written == 0 {
        return Err(FetchError::ExtractFailure("archive holds no class directories".into()));
    }
    for label in ClassLabel::ALL {
        std::fs::create_dir_all(dest.join(label.name())).map_err(|e| err(&e))?;
    }
    Ok(written)
}

/// Per-class counts of the extracted corpus, as printed by `fetch-data`.
pub fn summarize(dest: &Path) -> anyhow::Result<serde_json::Value> {
    let corpus = load_corpus(dest)?;
    let per_class: serde_json::Map<String, serde_json::Value> = ClassLabel::ALL
        .iter()
        .map(|l| (l.name().to_string(), corpus.report.per_class[l.index()].into()))
        .collect();
    Ok(serde_json::json!({
        "root": dest,
        "total": corpus.report.total(),
        "per_class": per_class,
        "skipped": corpus.report.skipped.len(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_mapping() {
        let t = |s: &str| target_path(Path::new(s));
        assert_eq!(t("dataset-resized/glass/glass1.jpg"), Some(PathBuf::from("glass/glass1.jpg")));
        assert_eq!(t("trash/a.jpg"), Some(PathBuf::from("trash/a.jpg")));
        assert_eq!(t("__MACOSX/dataset-resized/glass/._glass1.jpg"), None);
        assert_eq!(t("dataset-resized/.DS_Store"), None);
        assert_eq!(t("dataset-resized/readme.txt"), None);
        assert_eq!(t("glass"), None);
    }

    #[test]
    fn checksum() {
        let sum = verify(b"abc", None).unwrap();
        assert_eq!(sum, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert!(verify(b"abc", Some(&sum.to_uppercase())).is_ok());
        assert!(matches!(verify(b"abd", Some(&sum)), Err(FetchError::ChecksumMismatch { .. })));
    }
}
