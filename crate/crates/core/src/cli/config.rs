use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FenecError, Result};
use crate::fenec_log::TrainConfig;
use crate::params::{HyperParams, Method};

fn default_batch_size() -> usize {
    64
}
fn default_max_epochs() -> usize {
    1000
}
fn default_patience() -> usize {
    10
}
fn default_validation_fraction() -> f64 {
    0.1
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// SGD loop settings for the FeNeC-Log head; the learning rate lives in `hyper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            validation_fraction: default_validation_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_features: PathBuf,
    pub test_features: PathBuf,
    /// One split file shared by every seed, or one per seed.
    pub splits: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub hyper: HyperParams,
    #[serde(default)]
    pub training: TrainingSection,
    pub data: DataSection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| FenecError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file; relative data paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            FenecError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg = Self::from_json(&text)
            .map_err(|e| FenecError::Config(format!("{}: {e}", path.display())))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let base = fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        cfg.data.train_features = resolve(&cfg.data.train_features);
        cfg.data.test_features = resolve(&cfg.data.test_features);
        cfg.data.splits = cfg.data.splits.iter().map(|p| resolve(p)).collect();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.seeds.is_empty() {
            return Err(FenecError::Config("at least one seed is required".into()));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(FenecError::Config("seeds must be distinct".into()));
        }
        if self.data.splits.is_empty() {
            return Err(FenecError::Config(
                "data.splits must list at least one file".into(),
            ));
        }
        if self.data.splits.len() != 1 && self.data.splits.len() != self.seeds.len() {
            return Err(FenecError::Config(format!(
                "{} split files for {} seeds; give one split or one per seed",
                self.data.splits.len(),
                self.seeds.len()
            )));
        }
        if let Some(cfg) = self.train_config(0) {
            cfg.validate()?;
        }
        Ok(())
    }

    /// Split file used by the `run_index`-th seed.
    pub fn split_for_run(&self, run_index: usize) -> &Path {
        if self.data.splits.len() == 1 {
            &self.data.splits[0]
        } else {
            &self.data.splits[run_index]
        }
    }

    /// Training loop settings for FeNeC-Log; `None` for FeNeC.
    pub fn train_config(&self, seed: u64) -> Option<TrainConfig> {
        match (self.hyper.method, self.hyper.learning_rate) {
            (Method::FenecLog, Some(lr)) => Some(TrainConfig {
                learning_rate: lr,
                batch_size: self.training.batch_size,
                max_epochs: self.training.max_epochs,
                patience: self.training.patience,
                validation_fraction: self.training.validation_fraction,
                seed,
            }),
            _ => None,
        }
    }
}
