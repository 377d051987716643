use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Validation quantity watched by the scheduler and early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValLoss,
    ValAccuracy,
}

impl Monitor {
    /// Whether `value` beats `best` by at least `min_delta`. An improvement of
    /// exactly `min_delta` counts.
    pub fn improved(self, value: f64, best: Option<f64>, min_delta: f64) -> bool {
        let Some(best) = best else {
            return value.is_finite();
        };
        let gain = match self {
            Monitor::ValLoss => best - value,
            Monitor::ValAccuracy => value - best,
        };
        gain + 1e-12 >= min_delta
    }

    pub fn name(self) -> &'static str {
        match self {
            Monitor::ValLoss => "val_loss",
            Monitor::ValAccuracy => "val_accuracy",
        }
    }
}

impl FromStr for Monitor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "val_loss" => Ok(Monitor::ValLoss),
            "val_accuracy" | "val_acc" => Ok(Monitor::ValAccuracy),
            other => Err(Error::Config(format!(
                "unknown monitor `{other}` (expected val_loss or val_accuracy)"
            ))),
        }
    }
}

impl fmt::Display for Monitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// epochs without improvement, then starts counting again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub monitor: Monitor,
    pub best: Option<f64>,
    pub wait: usize,
}

/// A learning-rate change made at the end of an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayEvent {
    pub from: f64,
    pub to: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64, monitor: Monitor) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_delta,
            monitor,
            best: None,
            wait: 0,
        }
    }

    /// Records one epoch's monitored value; the returned rate applies from
    /// the next epoch.
    pub fn step(&mut self, value: f64) -> Option<DecayEvent> {
        if self.monitor.improved(value, self.best, self.min_delta) {
            self.best = Some(value);
            self.wait = 0;
            return None;
        }
        self.wait += 1;
        if self.wait < self.patience {
            return None;
        }
        self.wait = 0;
        let from = self.lr;
        self.lr *= self.factor;
        Some(DecayEvent { from, to: self.lr })
    }
}

/// Stops after `patience` consecutive epochs without improvement and
/// remembers the best epoch (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    pub monitor: Monitor,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub wait: usize,
}

/// Outcome of one early-stopping check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopCheck {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64, monitor: Monitor) -> Self {
        Self {
            patience,
            min_delta,
            monitor,
            best: None,
            best_epoch: None,
            wait: 0,
        }
    }

    pub fn step(&mut self, epoch: usize, value: f64) -> StopCheck {
        if self.monitor.improved(value, self.best, self.min_delta) {
            self.best = Some(value);
            self.best_epoch = Some(epoch);
            self.wait = 0;
            return StopCheck::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            StopCheck::Stop
        } else {
            StopCheck::Continue
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_finite_value_is_an_improvement() {
        assert!(Monitor::ValLoss.improved(3.0, None, 1e-4));
        assert!(!Monitor::ValLoss.improved(f64::NAN, None, 1e-4));
        assert!(Monitor::ValAccuracy.improved(0.6, Some(0.5), 1e-4));
        assert!(!Monitor::ValAccuracy.improved(0.4, Some(0.5), 1e-4));
    }

    #[test]
    fn monitor_names_round_trip() {
        for m in [Monitor::ValLoss, Monitor::ValAccuracy] {
            assert_eq!(m.name().parse::<Monitor>().unwrap(), m);
        }
    }
}
