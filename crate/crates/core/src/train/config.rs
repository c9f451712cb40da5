use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamWConfig, LrSchedule};
use crate::data::SynthParams;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::regress::DEFAULT_LOSS_WEIGHTS;

/// Where training and held-out samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub synth: SynthParams,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Directories in the `stem.left.ppm` layout; override the generator.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthParams::default(),
            train_samples: 300,
            val_samples: 50,
            train_dir: None,
            val_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub loss_weights: [f64; 4],
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Random crop `[H, W]`; `None` trains on whole images.
    pub crop: Option<[usize; 2]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 4,
            lr_max: 2e-4,
            lr_schedule: LrSchedule::OneCycle,
            weight_decay: 1e-4,
            betas: [0.9, 0.999],
            loss_weights: DEFAULT_LOSS_WEIGHTS,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            crop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.loss_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(self.lr_max > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("lr_max must be positive and weight_decay non-negative"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        if self.data.train_dir.is_none() {
            self.data.synth.validate()?;
            if self.data.train_samples == 0 {
                return Err(Error::invalid("train_samples must be positive"));
            }
        }
        if let Some([h, w]) = self.crop {
            if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
                return Err(Error::invalid(format!("crop {h}x{w} must be positive multiples of 16")));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            betas: self.betas,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
