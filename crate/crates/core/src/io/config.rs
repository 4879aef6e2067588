//! JSON run configuration.
//!
//! Every field is optional and falls back to [`TrainConfig::default`];
//! unknown keys are rejected so typos do not silently train with defaults.
//!
//! ```json
//! {
//!   "train": { "steps": 2000, "batch_size": 8, "sigma_range": [0, 20] },
//!   "eval": { "sigma": 20, "seed": 1 },
//!   "data": "patches/",
//!   "out": "runs/demo"
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cfa::DegradationSpec;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Fixed degradation for evaluation runs.
    pub eval: DegradationSpec,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        cfg.eval.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
