//! The run configuration file.
//!
//! A single TOML document with an explicit `version`. Unknown keys anywhere
//! are errors. Every omitted key takes its default, and the resolved form
//! written next to a run materializes all of them.
//!
//! ```toml
//! version = 1
//!
//! [data]
//! train = "data/train.jsonl"
//! eval = "data/eval.jsonl"
//!
//! [output]
//! dir = "runs/default"
//!
//! [env]
//! grid = 8
//!
//! [train]
//! steps = 200
//! omega = 5.0
//! ```

use std::path::{Path, PathBuf};

use revgrpo_core::scenes::EnvConfig;
use revgrpo_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training scenes.
    pub train: PathBuf,
    /// Held-out scenes evaluated after training, if present.
    pub eval: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: PathBuf::from("train.jsonl"),
            eval: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            data: DataConfig::default(),
            output: OutputConfig::default(),
            env: EnvConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        if cfg.version != CONFIG_VERSION {
            return Err(format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                cfg.version
            ));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Every violated invariant across the environment and training sections.
    pub fn validate(&self) -> Vec<String> {
        let mut v = self.env.validate();
        v.extend(self.train.validate());
        v
    }
}
