//! Experiment configuration: one JSON document covering every stage.
//!
//! Every field has a default, unknown keys are rejected, and a few seeds and
//! paths can be overridden from the environment (`UAMT_SEED`, `UAMT_DATA_SEED`,
//! `UAMT_DATA_DIR`, `UAMT_OUT_DIR`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PhantomConfig, SplitSizes};
use crate::error::{Error, Result};
use crate::inference::SlidingWindowConfig;
use crate::losses::LossWeights;
use crate::nn::NetConfig;
use crate::train::TrainConfig;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub phantom: PhantomConfig,
    pub split: SplitSizes,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub sliding_window: SlidingWindowConfig,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            split: SplitSizes::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            sliding_window: SlidingWindowConfig::default(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn env_u64(key: &str, lookup: &impl Fn(&str) -> Option<String>) -> Result<Option<u64>> {
    lookup(key)
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}={v:?} is not an unsigned integer")))
        })
        .transpose()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// Reads a config file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    /// Applies `UAMT_*` overrides through `lookup` (normally `std::env::var`).
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(seed) = env_u64("UAMT_SEED", &lookup)? {
            self.train.seed = seed;
        }
        if let Some(seed) = env_u64("UAMT_DATA_SEED", &lookup)? {
            self.phantom.seed = seed;
        }
        if let Some(dir) = lookup("UAMT_DATA_DIR") {
            self.data_dir = PathBuf::from(dir);
        }
        if let Some(dir) = lookup("UAMT_OUT_DIR") {
            self.out_dir = PathBuf::from(dir);
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(|k| std::env::var(k).ok())
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.net.check_spatial(self.train.crop).map_err(|e| Error::Config(format!("training crop: {e}")))?;
        let (window, _) = self.sliding_window.resolve(self.train.crop)?;
        self.net.check_spatial(window).map_err(|e| Error::Config(format!("sliding window: {e}")))?;
        for k in 0..3 {
            if self.train.crop[k] > self.phantom.shape[k] {
                return Err(Error::Config(format!(
                    "crop {:?} exceeds phantom shape {:?}",
                    self.train.crop, self.phantom.shape
                )));
            }
        }
        if self.split.labeled == 0 {
            return Err(Error::Config("split.labeled must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the fully resolved config (defaults and overrides applied).
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }
}
