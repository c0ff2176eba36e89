//! Run configuration files: `[section]` headers with `key = value` lines.
//!
//! ```toml
//! [model]
//! variant = "plainseg"
//! num_classes = 4
//! groups = 2
//!
//! [model.encoder]
//! img_size = 64
//! # ...
//!
//! [train]
//! lr = 0.001
//!
//! [data.synthetic]
//! size = 64
//!
//! [eval]
//! crop = 64
//! stride = 48
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory with a manifest (see `generate_dataset`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_dir: Option<PathBuf>,
    /// Generate data in memory instead of reading directories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// With synthetic data: the last `val_count` generated images form the
    /// validation split.
    #[serde(default)]
    pub val_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub crop: usize,
    pub stride: usize,
    /// Validate every this many iterations during training; 0 only at the end.
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { crop: 512, stride: 341, every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Tiny desk-scale run on synthetic shapes.
    pub fn tiny(model: ModelConfig) -> Self {
        let eval = EvalConfig { crop: model.encoder.img_size, stride: model.encoder.img_size * 3 / 4, every: 100 };
        let synthetic =
            SyntheticSpec { num_classes: model.num_classes, count: 250, seed: 1, ..SyntheticSpec::default() };
        let data = DataConfig { synthetic: Some(synthetic), val_count: 50, ..DataConfig::default() };
        Self { model, train: TrainConfig::tiny(), data, eval }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.schedule(self.model.encoder.depth)?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.eval.crop == 0 || self.eval.stride == 0 || self.eval.stride > self.eval.crop {
            return Err(Error::Config(format!(
                "eval stride {} must be in 1..=crop {}",
                self.eval.stride, self.eval.crop
            )));
        }
        match (&self.data.train_dir, &self.data.synthetic) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("data: set either train_dir or synthetic, not both".into()))
            }
            (None, Some(s)) => {
                s.validate()?;
                if s.num_classes != self.model.num_classes {
                    return Err(Error::Config(format!(
                        "data.synthetic.num_classes {} differs from model.num_classes {}",
                        s.num_classes, self.model.num_classes
                    )));
                }
                if self.data.val_count >= s.count {
                    return Err(Error::Config(format!(
                        "val_count {} leaves no training images of {}",
                        self.data.val_count, s.count
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Fails unless the data section names a source.
    pub fn require_data(&self) -> Result<()> {
        if self.data.train_dir.is_none() && self.data.synthetic.is_none() {
            return Err(Error::Config("data: one of train_dir or synthetic is required".into()));
        }
        Ok(())
    }

    /// Parses and validates. Syntax and type errors carry line and column.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
