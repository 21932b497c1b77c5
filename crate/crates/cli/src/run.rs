//! `train`, `evaluate` and `export`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde_json::{json, Value};
use wastewise_core::backbone::REGISTRY;
use wastewise_core::classifier::History;
use wastewise_core::dataset::{load_corpus, split_corpus, ImageSet, SplitManifest, SplitName};
use wastewise_core::export::PortableArtifact;
use wastewise_core::metrics::{self, comparison_csv};
use wastewise_core::{export_portable, ClassLabel, ClassReport, Classifier};

use crate::config::{RunConfig, RESOLVED_CONFIG};

pub const SPLIT_MANIFEST: &str = "split_manifest.json";
pub const HISTORY_CSV: &str = "history.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ARTIFACT: &str = "model.onnx";
pub const COMPARISON_CSV: &str = "comparison.csv";

#[derive(Debug, thiserror::Error)]
#[error("no split manifest at {0}; run `train` first")]
pub struct MissingManifest(pub PathBuf);

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub history: History,
    pub artifact: PortableArtifact,
}

/// Split, train, checkpoint and export one backbone. The manifest and
/// resolved config are written before training starts.
pub fn train_one(cfg: &RunConfig, backbone_id: &str) -> anyhow::Result<TrainOutcome> {
    let source = cfg.weights_source()?;
    let corpus = load_corpus(&cfg.data_root)?;
    for (id, reason) in &corpus.report.skipped {
        tracing::warn!("skipped {id}: {reason}");
    }
    let splits = split_corpus(&corpus.images, cfg.ratios, cfg.seed, cfg.stratified)?;
    tracing::info!(
        "{backbone_id}: {} images -> train {}, test {}, validation {}",
        splits.len(),
        splits.train.len(),
        splits.test.len(),
        splits.validation.len()
    );

    let run_dir = cfg.run_dir(backbone_id);
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    splits.manifest().write(run_dir.join(SPLIT_MANIFEST))?;
    let one = RunConfig { backbones: vec![backbone_id.to_string()], ..cfg.clone() };
    one.write(&run_dir.join(RESOLVED_CONFIG))?;

    let mut model = Classifier::<f32>::build(backbone_id, cfg.head, &source, cfg.seed)?;
    let counts = model.param_counts();
    tracing::info!("{backbone_id}: {} parameters, {} trainable, weights {source}", counts.total, counts.trainable);
    let history = model.train(&splits, &cfg.train)?.clone();
    std::fs::write(run_dir.join(HISTORY_CSV), history.to_csv())?;
    model.save(run_dir.join(CHECKPOINT_DIR))?;
    let artifact = export_portable(&model, run_dir.join(ARTIFACT))?;
    Ok(TrainOutcome { run_dir, history, artifact })
}

pub fn train_summary(backbone_id: &str, out: &TrainOutcome) -> Value {
    json!({
        "backbone": backbone_id,
        "run_dir": out.run_dir,
        "epochs": out.history.len(),
        "best_epoch": out.history.best_epoch,
        "stopped_early": out.history.stopped_early,
        "final": out.history.epochs.last(),
        "artifact": out.artifact.model_path,
        "sidecar": out.artifact.sidecar_path,
    })
}

pub struct Evaluation {
    pub backbone_id: String,
    pub split: SplitName,
    pub report: ClassReport<f64>,
    pub report_csv: PathBuf,
    pub confusion_csv: PathBuf,
}

pub fn split_name(split: SplitName) -> &'static str {
    match split {
        SplitName::Train => "train",
        SplitName::Test => "test",
        SplitName::Validation => "validation",
    }
}

/// Predicts the named split of a finished run and writes
/// `report_<split>.csv` and `confusion_<split>.csv` into the run directory.
pub fn evaluate_run(run_dir: &Path, data_root: Option<&Path>, split: SplitName) -> anyhow::Result<Evaluation> {
    let manifest_path = run_dir.join(SPLIT_MANIFEST);
    if !manifest_path.is_file() {
        return Err(MissingManifest(manifest_path).into());
    }
    let manifest = SplitManifest::read(&manifest_path)?;
    let root = match data_root {
        Some(r) => r.to_path_buf(),
        None => RunConfig::load(Some(&run_dir.join(RESOLVED_CONFIG)))?.data_root,
    };
    let model = Classifier::<f32>::load(run_dir.join(CHECKPOINT_DIR))?;
    let splits = manifest.resolve(&root)?;
    let items = splits.get(split);
    if items.is_empty() {
        bail!("the {} split of {} is empty", split_name(split), run_dir.display());
    }
    let set = ImageSet::load(items, model.backbone())?;
    let predicted: Vec<ClassLabel> = model.predict_images(&set.images).iter().map(|p| p.label()).collect();
    let cm = metrics::confusion(&set.labels, &predicted)?;
    let report = metrics::report::<f64>(&cm)?;

    let name = split_name(split);
    let report_csv = run_dir.join(format!("report_{name}.csv"));
    let confusion_csv = run_dir.join(format!("confusion_{name}.csv"));
    std::fs::write(&report_csv, report.to_csv())?;
    std::fs::write(&confusion_csv, cm.to_csv())?;
    Ok(Evaluation { backbone_id: model.spec().backbone_id.clone(), split, report, report_csv, confusion_csv })
}

pub fn evaluation_json(e: &Evaluation) -> Value {
    let per_class: serde_json::Map<String, Value> = ClassLabel::ALL
        .iter()
        .map(|l| {
            let p = &e.report.per_class[l.index()];
            let row = json!({"precision": p.precision, "recall": p.recall, "f1": p.f1, "support": e.report.support[l.index()]});
            (l.name().to_string(), row)
        })
        .collect();
    json!({
        "backbone": e.backbone_id,
        "split": split_name(e.split),
        "n": e.report.support.iter().sum::<u64>(),
        "accuracy": e.report.accuracy,
        "macro_f1": e.report.macro_f1,
        "per_class": per_class,
        "weakest_class": e.report.weakest_class(),
        "report_csv": e.report_csv,
        "confusion_csv": e.confusion_csv,
    })
}

pub fn write_comparison(output_dir: &Path, evals: &[Evaluation]) -> anyhow::Result<PathBuf> {
    let rows: Vec<(&str, &str, &ClassReport<f64>)> =
        evals.iter().map(|e| (e.backbone_id.as_str(), split_name(e.split), &e.report)).collect();
    let path = output_dir.join(COMPARISON_CSV);
    std::fs::write(&path, comparison_csv(rows))?;
    Ok(path)
}

pub fn all_backbone_ids() -> Vec<String> {
    REGISTRY.iter().map(|e| e.id.to_string()).collect()
}

pub fn export_run(run_dir: &Path, out: Option<&Path>) -> anyhow::Result<PortableArtifact> {
    let model = Classifier::<f32>::load(run_dir.join(CHECKPOINT_DIR))?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join(ARTIFACT));
    Ok(export_portable(&model, out)?)
}
