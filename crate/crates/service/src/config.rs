use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wastewise_core::rewards::PointsPolicy;

pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("environment variable {var}={value:?} is not valid")]
    Env { var: String, value: String },
}

/// Service settings. File values are overridden by `WASTEWISE_*` variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// ONNX artifact; its sidecar sits next to it.
    pub artifact: PathBuf,
    /// Carbon factor JSON; built-in placeholders when absent.
    pub factor_table: Option<PathBuf>,
    /// Class -> guidance JSON; built-in placeholders when absent.
    pub suggestions: Option<PathBuf>,
    /// Ledger journal and feedback images live here.
    pub data_dir: PathBuf,
    pub bind: String,
    pub port: u16,
    pub max_upload_bytes: usize,
    pub feedback_quota_bytes: u64,
    pub points: PointsPolicy,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            artifact: PathBuf::from("artifacts/model.onnx"),
            factor_table: None,
            suggestions: None,
            data_dir: PathBuf::from("data/service"),
            bind: "127.0.0.1".into(),
            port: 8080,
            max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES,
            feedback_quota_bytes: 1 << 30,
            points: PointsPolicy::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    /// Applies overrides from `(name, value)` pairs, usually `std::env::vars()`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        for (var, value) in vars {
            let bad = || ConfigError::Env { var: var.clone(), value: value.clone() };
            match var.as_str() {
                "WASTEWISE_ARTIFACT" => self.artifact = value.clone().into(),
                "WASTEWISE_FACTOR_TABLE" => self.factor_table = Some(value.clone().into()),
                "WASTEWISE_SUGGESTIONS" => self.suggestions = Some(value.clone().into()),
                "WASTEWISE_DATA_DIR" => self.data_dir = value.clone().into(),
                "WASTEWISE_BIND" => self.bind = value.clone(),
                "WASTEWISE_PORT" => self.port = value.parse().map_err(|_| bad())?,
                "WASTEWISE_MAX_UPLOAD_BYTES" => self.max_upload_bytes = value.parse().map_err(|_| bad())?,
                "WASTEWISE_FEEDBACK_QUOTA_BYTES" => self.feedback_quota_bytes = value.parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        Ok(())
    }

    /// File (if any), then process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_toml_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }
}
