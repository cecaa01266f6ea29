//! Run configuration for `train`, read from TOML.
//!
//! Every section and key is optional and falls back to the library
//! default, except `data.root`. Unknown keys are rejected. Relative paths
//! are resolved against the directory holding the config file.
//!
//! ```toml
//! [data]
//! root = "drive"
//!
//! [preprocess]
//! clahe = true
//! size = 512          # square side in pixels; 0 keeps the native size
//!
//! [clahe]
//! tiles_x = 8
//! tiles_y = 8
//! clip_factor = 2.0
//!
//! [augment]
//! ops = ["identity", "hflip", "vflip", "rotate"]
//! seed = 0
//! rotation_range = 30.0
//!
//! [split]
//! train_count = 30
//! val_fraction = 0.2
//! test_count = 10
//! seed = 0
//!
//! [model]
//! depth = 4
//! base_channels = 64
//!
//! [train]
//! learning_rate = 1e-4
//! epochs = 50
//! batch_size = 2
//! seed = 0
//!
//! [loss]
//! eps_dice = 1e-7
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vesselseg::data::SplitSpec;
use vesselseg::imaging::{AugmentSpec, ClaheConfig, PreprocessConfig};
use vesselseg::model::UNetConfig;
use vesselseg::training::{LossConfig, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub clahe: bool,
    pub size: usize,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection { clahe: true, size: 512 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub preprocess: PreprocessSection,
    pub clahe: ClaheConfig,
    pub augment: AugmentSpec,
    pub split: SplitSpec,
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
    }

    /// Reads, resolves paths against the file's directory, and validates.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.data.root.is_relative() && !cfg.data.root.as_os_str().is_empty() {
            cfg.data.root = base.join(&cfg.data.root);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.data.root.as_os_str().is_empty() {
            return Err(CliError::Usage("configuration is missing data.root".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.preprocess.clahe {
            self.clahe.validate()?;
        }
        if self.preprocess.size != 0 && !self.preprocess.size.is_multiple_of(self.model.size_multiple()) {
            return Err(CliError::Usage(format!(
                "preprocess.size {} is not a multiple of {} as required by model.depth {}",
                self.preprocess.size,
                self.model.size_multiple(),
                self.model.depth
            )));
        }
        Ok(())
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            clahe: self.preprocess.clahe.then(|| self.clahe.clone()),
            size: (self.preprocess.size != 0).then_some((self.preprocess.size, self.preprocess.size)),
        }
    }

    /// Canonical serialization: every key, in declaration order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }
}
