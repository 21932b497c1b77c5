use std::path::{Path, PathBuf};

use wastewise_core::dataset::decode_path;
use wastewise_core::result::SuggestionMap;
use wastewise_core::{load_portable, CarbonFactorTable, ClassificationResult};

/// Offline classification of each image. Results are returned in input
/// order; a failing image does not stop the others.
pub fn predict(
    artifact: &Path,
    images: &[PathBuf],
    table: Option<&Path>,
    suggestions: Option<&Path>,
) -> anyhow::Result<Vec<Result<ClassificationResult, anyhow::Error>>> {
    let model = load_portable(artifact)?;
    let table = match table {
        Some(p) => CarbonFactorTable::load(p)?,
        None => CarbonFactorTable::default(),
    };
    let suggestions = match suggestions {
        Some(p) => SuggestionMap::load(p).map_err(anyhow::Error::msg)?,
        None => SuggestionMap::default(),
    };
    Ok(images
        .iter()
        .map(|path| {
            let image = decode_path(path)?;
            let probs = model.predict(&model.prepare(&image))?;
            let id = uuid::Uuid::new_v4().to_string();
            Ok(ClassificationResult::assemble(id, &probs, &suggestions, &table, 0))
        })
        .collect())
}
