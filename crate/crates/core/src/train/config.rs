use serde::{Deserialize, Serialize};

use super::Monitor;
use crate::data::TaskMode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_patience: usize,
    pub early_stop_patience: usize,
    pub min_delta: f64,
    pub monitor: Monitor,
    pub seed: u64,
    pub task: TaskMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 1000,
            lr_decay_factor: 0.1,
            lr_decay_patience: 5,
            early_stop_patience: 10,
            min_delta: 1e-4,
            monitor: Monitor::ValLoss,
            seed: 0,
            task: TaskMode::FineGrained18,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return fail(format!("lr_decay_factor must be in (0, 1), got {}", self.lr_decay_factor));
        }
        if self.lr_decay_patience == 0 || self.early_stop_patience == 0 {
            return fail("patiences must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return fail(format!("min_delta must be non-negative, got {}", self.min_delta));
        }
        Ok(())
    }
}
