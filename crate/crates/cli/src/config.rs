//! Declarative run configuration.
//!
//! One toml file describes an experiment end to end. A missing section
//! falls back to the CPU-scale desk setup; a field missing inside a present
//! section takes the library default.
//!
//! ```toml
//! [system]            # band, array and geometry parameters
//! [model]             # d_re, d_hid, num_experts, top_k, num_heads, num_blocks
//! [train]             # target_lr, epochs, batch_size, kappa, snr_db_train, input_density, ...
//! [pilots]
//! ls_densities = ["1/4", "1/2"]
//! [data]
//! train_count = 4096
//! val_count = 1024
//! seed = 0
//! [run]
//! snr_db = [0.0, 5.0, 10.0, 15.0, 20.0]
//! eval_seed = 7
//! ```

use std::path::Path;

use mdfce_core::channel::SystemConfig;
use mdfce_core::net::ModelConfig;
use mdfce_core::train::{Density, TrainConfig};
use mdfce_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PilotSection {
    /// Densities of the LS baselines evaluated alongside the model.
    pub ls_densities: Vec<Density>,
}

impl Default for PilotSection {
    fn default() -> Self {
        Self {
            ls_densities: vec![Density::new(1, 4).expect("valid"), Density::new(1, 2).expect("valid")],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_count: 4096,
            val_count: 1024,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub snr_db: Vec<f64>,
    pub eval_seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            eval_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "SystemConfig::desk")]
    pub system: SystemConfig,
    #[serde(default = "ModelConfig::desk")]
    pub model: ModelConfig,
    #[serde(default = "desk_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub pilots: PilotSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub run: RunSection,
}

fn desk_train() -> TrainConfig {
    TrainConfig {
        epochs: 80,
        snr_db_train: 15.0,
        input_density: Density::new(1, 4).expect("valid"),
        ..TrainConfig::desk()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::desk(),
            model: ModelConfig::desk(),
            train: desk_train(),
            pilots: PilotSection::default(),
            data: DataSection::default(),
            run: RunSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The file's config, or the desk defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.data.train_count == 0 || self.data.val_count == 0 {
            return Err(Error::Config("data.train_count and data.val_count must be >= 1".into()));
        }
        if self.run.snr_db.iter().any(|s| s.is_nan() || *s == f64::NEG_INFINITY) {
            return Err(Error::Config("run.snr_db entries must be numbers or inf".into()));
        }
        Ok(())
    }
}
