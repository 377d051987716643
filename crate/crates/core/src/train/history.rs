use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Rate used during this epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_secs: f64,
    /// `;`-separated markers such as `best` and `lr_decay`.
    pub event: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStopping => "early_stopping",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: Option<usize>,
    pub stop_reason: Option<StopReason>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.epochs.get(e - 1))
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    /// Writes `epoch,lr,train_loss,train_acc,val_loss,val_acc,wall_secs,event`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let fail = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        let mut writer = csv::Writer::from_path(path).map_err(fail)?;
        for record in &self.epochs {
            writer.serialize(record).map_err(fail)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads the rows written by [`write_csv`](Self::write_csv); the best epoch
    /// is recovered from the `best` markers.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let fail = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        let epochs = csv::Reader::from_path(path)
            .map_err(fail)?
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(fail)?;
        let best_epoch = epochs
            .iter()
            .filter(|e| e.event.split(';').any(|m| m == "best"))
            .map(|e| e.epoch)
            .next_back();
        let stop_reason = epochs
            .last()
            .filter(|e| e.event.split(';').any(|m| m == "early_stop"))
            .map(|_| StopReason::EarlyStopping);
        Ok(Self {
            epochs,
            best_epoch,
            stop_reason,
        })
    }
}
