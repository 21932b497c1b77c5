use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use wastewise_core::backbone::{self, REGISTRY};
use wastewise_core::{HeadConfig, SplitRatios, TrainConfig, WeightsSource};

pub const DEFAULT_DATASET_URL: &str = "https://github.com/garythung/trashnet/raw/master/data/dataset-resized.zip";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

/// Everything a run depends on. Loaded from `--config` (TOML or JSON),
/// then overridden by flags, then written next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub ratios: SplitRatios,
    pub stratified: bool,
    /// Seeds the split, initialization and batch order.
    pub seed: u64,
    pub backbones: Vec<String>,
    pub head: HeadConfig,
    pub train: TrainConfig,
    /// Directory of `<backbone>.safetensors` files.
    pub weights_dir: Option<PathBuf>,
    pub random_init: bool,
    /// Each backbone's run goes to `<output_dir>/<backbone>/`.
    pub output_dir: PathBuf,
    pub dataset_url: String,
    pub dataset_sha256: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data/trashnet"),
            ratios: SplitRatios::default(),
            stratified: false,
            seed: 42,
            backbones: vec!["mobilenet_v2".into()],
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            weights_dir: None,
            random_init: false,
            output_dir: PathBuf::from("runs"),
            dataset_url: DEFAULT_DATASET_URL.into(),
            dataset_sha256: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(anyhow::Error::from)
        } else {
            toml::from_str(&text).map_err(anyhow::Error::from)
        };
        parsed.with_context(|| format!("parsing config {}", path.display()))
    }

    /// Checks consistency and pins derived values.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        self.train.seed = self.seed;
        self.ratios.validate()?;
        self.head.validate()?;
        self.train.validate()?;
        if self.backbones.is_empty() {
            bail!("no backbone selected");
        }
        for id in &self.backbones {
            if backbone::lookup(id).is_none() {
                let known: Vec<&str> = REGISTRY.iter().map(|e| e.id).collect();
                bail!("unknown backbone `{id}` (known: {})", known.join(", "));
            }
        }
        Ok(self)
    }

    pub fn weights_source(&self) -> anyhow::Result<WeightsSource> {
        match (&self.weights_dir, self.random_init) {
            (_, true) => Ok(WeightsSource::Random),
            (Some(dir), false) => Ok(WeightsSource::Pretrained(dir.clone())),
            (None, false) => bail!("pretrained backbone weights required: pass --weights-dir, or --random-init to train from scratch"),
        }
    }

    pub fn run_dir(&self, backbone_id: &str) -> PathBuf {
        self.output_dir.join(backbone_id)
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_configs_parse() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("run.toml");
        std::fs::write(&t, "seed = 7\nbackbones = [\"mobilenet\"]\n[train]\nmax_epochs = 3\n[ratios]\ntrain = 0.5\ntest = 0.25\nvalidation = 0.25\n").unwrap();
        let cfg = RunConfig::load(Some(&t)).unwrap().resolve().unwrap();
        assert_eq!((cfg.seed, cfg.train.seed, cfg.train.max_epochs), (7, 7, 3));
        assert_eq!(cfg.ratios, SplitRatios::new(0.5, 0.25, 0.25));

        let j = dir.path().join("run.json");
        cfg.write(&j).unwrap();
        assert_eq!(RunConfig::load(Some(&j)).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        let cfg = RunConfig { backbones: vec!["vgg16".into()], ..RunConfig::default() };
        assert!(cfg.resolve().is_err());
        let cfg = RunConfig { ratios: SplitRatios::new(0.5, 0.6, 0.1), ..RunConfig::default() };
        assert!(cfg.resolve().is_err());
        assert!(RunConfig::default().weights_source().is_err());
    }
}
