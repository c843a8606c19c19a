//! JSON run configuration shared by the command-line verbs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{make_calibration, CalibSource, CalibrationSet, ModelConfig, TrainConfig};
use crate::recon::{QuantScheme, ReconConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub source: CalibSource,
    pub n_samples: usize,
    pub seq_len: usize,
}

impl DataSpec {
    /// Paths in text sources are taken relative to `base`.
    pub fn load(&self, base: &Path) -> Result<CalibrationSet> {
        let source = match &self.source {
            CalibSource::Text { path } if path.is_relative() => CalibSource::Text { path: base.join(path) },
            s => s.clone(),
        };
        make_calibration(&source, self.n_samples, self.seq_len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Full-precision input container.
    pub model: PathBuf,
    pub calibration: DataSpec,
    /// Held-out corpus for perplexity and RMSE.
    #[serde(default)]
    pub eval: Option<DataSpec>,
    #[serde(default)]
    pub scheme: QuantScheme,
    #[serde(default)]
    pub recon: ReconConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.model.is_relative() {
            cfg.model = base.join(&cfg.model);
        }
        for spec in std::iter::once(&mut cfg.calibration).chain(cfg.eval.as_mut()) {
            if let CalibSource::Text { path } = &mut spec.source {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        self.recon.validate()?;
        for spec in std::iter::once(&self.calibration).chain(self.eval.as_ref()) {
            if spec.n_samples == 0 || spec.seq_len == 0 {
                return Err(Error::Config("n_samples and seq_len must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Settings for the synthetic full-precision model used in experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(64, 64, 4, 3),
            train: TrainConfig::default(),
            init_seed: 0,
        }
    }
}
