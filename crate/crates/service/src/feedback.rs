//! Misclassification reports: an NDJSON record log plus content-addressed
//! image copies under `<data_dir>/feedback/`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wastewise_core::ClassLabel;

const ENOSPC: i32 = 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub feedback_id: String,
    pub event_id: Option<String>,
    /// File name under `feedback/images/`: `<sha256>.<ext>`.
    pub image: String,
    pub predicted: ClassLabel,
    pub corrected: ClassLabel,
    pub user_id: Option<String>,
    pub received_at: DateTime<Utc>,
}

pub struct NewFeedback<'a> {
    pub image: &'a [u8],
    pub extension: &'a str,
    pub predicted: ClassLabel,
    pub corrected: ClassLabel,
    pub user_id: Option<String>,
    pub event_id: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum FeedbackError {
    #[error("predicted and corrected are both {0}")]
    SameLabel(ClassLabel),
    #[error("feedback storage is full")]
    StorageFull,
    #[error("feedback storage failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt feedback log {path} line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
}

struct Inner {
    records: HashMap<String, FeedbackRecord>,
    used_bytes: u64,
    log: File,
}

pub struct FeedbackStore {
    images: PathBuf,
    log_path: PathBuf,
    quota_bytes: u64,
    inner: Mutex<Inner>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> FeedbackError + '_ {
    move |source| {
        if source.raw_os_error() == Some(ENOSPC) {
            FeedbackError::StorageFull
        } else {
            FeedbackError::Io { path: path.to_path_buf(), source }
        }
    }
}

impl FeedbackStore {
    pub fn open(data_dir: &Path, quota_bytes: u64) -> Result<Self, FeedbackError> {
        let root = data_dir.join("feedback");
        let images = root.join("images");
        std::fs::create_dir_all(&images).map_err(io(&images))?;
        let log_path = root.join("feedback.ndjson");

        let mut records = HashMap::new();
        let text = match std::fs::read_to_string(&log_path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io(&log_path)(e)),
        };
        let mut offset = 0;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            if !line.ends_with('\n') {
                tracing::warn!("dropping torn final line in {}", log_path.display());
                let f = OpenOptions::new().write(true).open(&log_path).map_err(io(&log_path))?;
                f.set_len(offset as u64).map_err(io(&log_path))?;
                break;
            }
            offset += line.len();
            if line.trim().is_empty() {
                continue;
            }
            let r: FeedbackRecord = serde_json::from_str(line)
                .map_err(|e| FeedbackError::Corrupt { path: log_path.clone(), line: i + 1, reason: e.to_string() })?;
            records.insert(r.feedback_id.clone(), r);
        }
        let mut used_bytes = 0;
        for entry in std::fs::read_dir(&images).map_err(io(&images))? {
            let entry = entry.map_err(io(&images))?;
            used_bytes += entry.metadata().map_err(io(&images))?.len();
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path).map_err(io(&log_path))?;
        Ok(Self { images, log_path, quota_bytes, inner: Mutex::new(Inner { records, used_bytes, log }) })
    }

    /// Stores the image (once per distinct content) and appends the record.
    pub fn submit(&self, new: NewFeedback<'_>) -> Result<FeedbackRecord, FeedbackError> {
        if new.predicted == new.corrected {
            return Err(FeedbackError::SameLabel(new.predicted));
        }
        let name = format!("{}.{}", hex::encode(Sha256::digest(new.image)), new.extension);
        let path = self.images.join(&name);
        let record = FeedbackRecord {
            feedback_id: uuid::Uuid::new_v4().to_string(),
            event_id: new.event_id,
            image: name,
            predicted: new.predicted,
            corrected: new.corrected,
            user_id: new.user_id,
            received_at: Utc::now(),
        };
        let mut line = serde_json::to_vec(&record).expect("serializable record");
        line.push(b'\n');

        let mut inner = self.inner.lock().expect("feedback lock");
        if !path.exists() {
            let size = new.image.len() as u64;
            if inner.used_bytes + size + line.len() as u64 > self.quota_bytes {
                return Err(FeedbackError::StorageFull);
            }
            let tmp = self.images.join(format!(".{}.tmp", record.feedback_id));
            std::fs::write(&tmp, new.image).map_err(io(&tmp))?;
            std::fs::rename(&tmp, &path).map_err(io(&path))?;
            inner.used_bytes += size;
        }
        inner.log.write_all(&line).and_then(|_| inner.log.flush()).map_err(io(&self.log_path))?;
        inner.records.insert(record.feedback_id.clone(), record.clone());
        Ok(record)
    }

    pub fn get(&self, feedback_id: &str) -> Option<FeedbackRecord> {
        self.inner.lock().expect("feedback lock").records.get(feedback_id).cloned()
    }

    pub fn image_path(&self, record: &FeedbackRecord) -> PathBuf {
        self.images.join(&record.image)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("feedback lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn new<'a>(bytes: &'a [u8], p: ClassLabel, c: ClassLabel) -> NewFeedback<'a> {
        NewFeedback { image: bytes, extension: "png", predicted: p, corrected: c, user_id: None, event_id: None }
    }

    #[test]
    fn records_survive_reopen_and_images_dedupe() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeedbackStore::open(dir.path(), 1 << 20).unwrap();
        let a = store.submit(new(b"abc", ClassLabel::Plastic, ClassLabel::Glass)).unwrap();
        let b = store.submit(new(b"abc", ClassLabel::Metal, ClassLabel::Glass)).unwrap();
        assert_ne!(a.feedback_id, b.feedback_id);
        assert_eq!(a.image, b.image);
        assert_eq!(std::fs::read(store.image_path(&a)).unwrap(), b"abc");
        drop(store);
        let store = FeedbackStore::open(dir.path(), 1 << 20).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.get(&a.feedback_id), Some(a));
    }

    #[test]
    fn same_label_and_quota() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeedbackStore::open(dir.path(), 600).unwrap();
        assert!(matches!(
            store.submit(new(b"x", ClassLabel::Glass, ClassLabel::Glass)),
            Err(FeedbackError::SameLabel(ClassLabel::Glass))
        ));
        store.submit(new(&[1; 100], ClassLabel::Paper, ClassLabel::Cardboard)).unwrap();
        assert!(matches!(
            store.submit(new(&[2; 500], ClassLabel::Paper, ClassLabel::Cardboard)),
            Err(FeedbackError::StorageFull)
        ));
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn torn_tail_tolerated() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeedbackStore::open(dir.path(), 1 << 20).unwrap();
        store.submit(new(b"abc", ClassLabel::Plastic, ClassLabel::Glass)).unwrap();
        drop(store);
        let log = dir.path().join("feedback/feedback.ndjson");
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"feedback_id\":\"x").unwrap();
        let store = FeedbackStore::open(dir.path(), 1 << 20).unwrap();
        assert_eq!(store.len(), 1);
        store.submit(new(b"def", ClassLabel::Paper, ClassLabel::Trash)).unwrap();
        drop(store);
        assert_eq!(FeedbackStore::open(dir.path(), 1 << 20).unwrap().len(), 2);
    }
}
