use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::bundle::read_json;

/// How the learning rate decays over epochs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Divide by 10 once half the epochs are done.
    #[default]
    Fiq,
    /// Divide by 10 after every epoch.
    Imfq,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "fiq" => Ok(Self::Fiq),
            "imfq" => Ok(Self::Imfq),
            other => Err(Error::Config(format!("unknown schedule {other} (fiq | imfq)"))),
        }
    }
}

/// Which training data the run stands for; selects the default epoch count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    #[default]
    Fiq,
    Imfq,
    Disrupted,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "fiq" => Ok(Self::Fiq),
            "imfq" => Ok(Self::Imfq),
            "disrupted" => Ok(Self::Disrupted),
            other => Err(Error::Config(format!(
                "unknown regime {other} (fiq | imfq | disrupted)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs_fiq: usize,
    pub epochs_imfq: usize,
    pub epochs_disrupted: usize,
    /// Overrides the regime's epoch count when set.
    pub epochs: Option<usize>,
    pub regime: Regime,
    pub batch_size: usize,
    pub fusion_lr_multiplier: f64,
    pub backbone_lr_multiplier: f64,
    pub seed: u64,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            epochs_fiq: 14,
            epochs_imfq: 3,
            epochs_disrupted: 42,
            epochs: None,
            regime: Regime::Fiq,
            batch_size: 32,
            fusion_lr_multiplier: 10.0,
            backbone_lr_multiplier: 1.0,
            seed: 0,
            schedule: Schedule::Fiq,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.regime {
            Regime::Fiq => self.epochs_fiq,
            Regime::Imfq => self.epochs_imfq,
            Regime::Disrupted => self.epochs_disrupted,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.base_lr) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !positive(self.fusion_lr_multiplier) || !positive(self.backbone_lr_multiplier) {
            return Err(Error::Config("learning-rate multipliers must be positive".into()));
        }
        if self.epochs_fiq == 0 || self.epochs_imfq == 0 || self.epochs_disrupted == 0 {
            return Err(Error::Config("default epoch counts must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// Learning rate for `epoch` of a run with `config.epochs()` epochs.
pub fn lr_schedule(config: &TrainConfig, epoch: usize) -> f64 {
    match config.schedule {
        Schedule::Fiq => {
            let half = config.epochs().div_ceil(2);
            if epoch < half {
                config.base_lr
            } else {
                config.base_lr / 10.0
            }
        }
        Schedule::Imfq => config.base_lr / 10f64.powi(epoch as i32),
    }
}
