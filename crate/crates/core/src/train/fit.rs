use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, eval_pass, EarlyStopper, EpochRecord, OptimizerState, PlateauScheduler, StopCheck,
    StopReason, TrainConfig, TrainHistory,
};
use crate::augment::{augment_batch, AugmentationPolicy};
use crate::autograd::Tape;
use crate::data::{load_batch, Normalization, SampleSource, TaskMode};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Model};

pub const META_TASK: &str = "task";
pub const META_NORMALIZATION: &str = "normalization";
pub const META_EPOCH: &str = "epoch";
const META_TRAIN_STATE: &str = "train_state";

pub const CHECKPOINT_DIR: &str = "checkpoints";
/// Paths relative to the run directory.
pub const BEST_CHECKPOINT: &str = "checkpoints/best.ckpt";
pub const LAST_CHECKPOINT: &str = "checkpoints/last.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

const SHUFFLE_STREAM: u64 = 0x7368_7566;

/// Metadata stored with every checkpoint written by [`train`].
pub fn checkpoint_metadata(
    task: TaskMode,
    normalization: &Normalization,
    epoch: usize,
) -> BTreeMap<String, String> {
    BTreeMap::from([
        (META_TASK.to_string(), task.cli_name().to_string()),
        (
            META_NORMALIZATION.to_string(),
            serde_json::to_string(normalization).expect("plain data serializes"),
        ),
        (META_EPOCH.to_string(), epoch.to_string()),
    ])
}

/// Task and normalization recorded in checkpoint metadata.
pub fn read_checkpoint_metadata(meta: &BTreeMap<String, String>) -> Result<(TaskMode, Normalization)> {
    let task = meta
        .get(META_TASK)
        .ok_or_else(|| Error::Format("checkpoint metadata lacks `task`".into()))?
        .parse()?;
    let normalization = match meta.get(META_NORMALIZATION) {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("checkpoint normalization: {e}")))?,
        None => Normalization::None,
    };
    Ok((task, normalization))
}

/// Sample order for one epoch, fixed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut key = [0u8; 32];
    for (chunk, v) in key
        .chunks_mut(8)
        .zip([seed, epoch as u64, 0, SHUFFLE_STREAM])
    {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::from_seed(key));
    order
}

#[derive(Serialize, Deserialize)]
struct TrainState {
    epoch: usize,
    scheduler: PlateauScheduler,
    stopper: EarlyStopper,
    history: TrainHistory,
}

pub struct TrainOptions<'a> {
    pub policy: AugmentationPolicy,
    /// Applied after augmentation.
    pub normalization: Normalization,
    /// Receives the checkpoints and `history.csv` when set.
    pub run_dir: Option<PathBuf>,
    /// Continue from the run directory's last checkpoint when it exists.
    pub resume: bool,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            policy: AugmentationPolicy::default(),
            normalization: Normalization::None,
            run_dir: None,
            resume: false,
            on_epoch: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub optimizer: OptimizerState<f32>,
}

/// Runs the epoch loop and leaves `model` holding the weights of the best
/// epoch.
pub fn train(
    model: &mut Model<f32>,
    train_set: &dyn SampleSource,
    val_set: &dyn SampleSource,
    config: &TrainConfig,
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    options.policy.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Dataset("train and validation splits must be non-empty".into()));
    }
    if model.config().num_classes != config.task.num_classes() {
        return Err(Error::Config(format!(
            "model has {} outputs but task {} has {} classes",
            model.config().num_classes,
            config.task,
            config.task.num_classes()
        )));
    }
    if let Some(dir) = &options.run_dir {
        let checkpoints = dir.join(CHECKPOINT_DIR);
        std::fs::create_dir_all(&checkpoints).map_err(|e| Error::io(&checkpoints, e))?;
    }

    let mut optimizer = OptimizerState::<f32>::default();
    let mut scheduler = PlateauScheduler::new(
        config.learning_rate,
        config.lr_decay_factor,
        config.lr_decay_patience,
        config.min_delta,
        config.monitor,
    );
    let mut stopper = EarlyStopper::new(config.early_stop_patience, config.min_delta, config.monitor);
    let mut history = TrainHistory::default();
    let mut best_model = model.clone();
    let mut start = 1;

    if let (true, Some(dir)) = (options.resume, &options.run_dir) {
        let last = dir.join(LAST_CHECKPOINT);
        if last.exists() {
            let ckpt = load_checkpoint::<f32>(&last)?;
            let state: TrainState = ckpt
                .metadata
                .get(META_TRAIN_STATE)
                .ok_or_else(|| Error::Format(format!("{} has no training state", last.display())))
                .and_then(|s| {
                    serde_json::from_str(s).map_err(|e| Error::Format(format!("{}: {e}", last.display())))
                })?;
            if ckpt.model.config() != model.config() {
                return Err(Error::Config(format!(
                    "{} was written for a different architecture",
                    last.display()
                )));
            }
            *model = ckpt.model;
            optimizer = ckpt.optimizer.unwrap_or_default();
            best_model = match state.history.best_epoch {
                Some(_) => load_checkpoint::<f32>(dir.join(BEST_CHECKPOINT))?.model,
                None => model.clone(),
            };
            scheduler = state.scheduler;
            stopper = state.stopper;
            history = state.history;
            // A run capped by max_epochs may be extended; an early stop is final.
            if history.stop_reason == Some(StopReason::MaxEpochs) {
                history.stop_reason = None;
            }
            start = state.epoch + 1;
        }
    }

    let finished = history.stop_reason.is_some();
    for epoch in start..=config.max_epochs {
        if finished {
            break;
        }
        let started = Instant::now();
        let lr = scheduler.lr;
        let (train_loss, train_acc) = run_epoch(model, train_set, config, &options, &mut optimizer, lr, epoch)?;
        let val = eval_pass(model, val_set, &options.normalization, config.task, config.batch_size)?;
        let monitored = match config.monitor {
            super::Monitor::ValLoss => val.loss,
            super::Monitor::ValAccuracy => val.accuracy(),
        };

        let mut events = Vec::new();
        let check = stopper.step(epoch, monitored);
        if check == StopCheck::Improved {
            events.push("best");
            history.best_epoch = Some(epoch);
            best_model = model.clone();
        }
        if scheduler.step(monitored).is_some() {
            events.push("lr_decay");
        }
        let stop = check == StopCheck::Stop;
        if stop {
            events.push("early_stop");
            history.stop_reason = Some(StopReason::EarlyStopping);
        } else if epoch == config.max_epochs {
            history.stop_reason = Some(StopReason::MaxEpochs);
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            train_acc,
            val_loss: val.loss,
            val_acc: val.accuracy(),
            wall_secs: started.elapsed().as_secs_f64(),
            event: events.join(";"),
        };
        history.epochs.push(record.clone());
        if let Some(callback) = options.on_epoch.as_mut() {
            callback(&record);
        }

        if let Some(dir) = &options.run_dir {
            let meta = checkpoint_metadata(config.task, &options.normalization, epoch);
            if check == StopCheck::Improved {
                save_checkpoint(dir.join(BEST_CHECKPOINT), model, None, &meta)?;
            }
            let mut last_meta = meta;
            let state = TrainState {
                epoch,
                scheduler: scheduler.clone(),
                stopper: stopper.clone(),
                history: history.clone(),
            };
            last_meta.insert(
                META_TRAIN_STATE.into(),
                serde_json::to_string(&state).map_err(|e| Error::Format(e.to_string()))?,
            );
            save_checkpoint(dir.join(LAST_CHECKPOINT), model, Some(&optimizer), &last_meta)?;
            history.write_csv(dir.join(HISTORY_FILE))?;
        }
        if stop {
            break;
        }
    }

    if history.best_epoch.is_some() {
        *model = best_model;
    }
    Ok(TrainOutcome { history, optimizer })
}

/// One pass over the training split. Returns mean loss and accuracy.
fn run_epoch(
    model: &mut Model<f32>,
    train_set: &dyn SampleSource,
    config: &TrainConfig,
    options: &TrainOptions<'_>,
    optimizer: &mut OptimizerState<f32>,
    lr: f64,
    epoch: usize,
) -> Result<(f64, f64)> {
    let order = epoch_order(train_set.len(), config.seed, epoch);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in order.chunks(config.batch_size) {
        let raw = load_batch(train_set, chunk, &Normalization::None, config.task)?;
        let mut batch = augment_batch(&raw, &options.policy, config.seed, epoch as u64)?;
        options.normalization.apply_batch(&mut batch.images)?;

        let mut tape = Tape::new();
        let x = tape.leaf(batch.images);
        let pass = model.forward_train(&mut tape, x)?;
        let (loss, probs) = tape.softmax_cross_entropy(pass.logits, &batch.labels)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { epoch, loss: value });
        }
        tape.backward(loss)?;
        let grads: IndexMap<String, _> = pass
            .params
            .iter()
            .filter_map(|(name, &var)| tape.grad(var).map(|g| (name.clone(), g.clone())))
            .collect();
        adam_step(model.params_mut(), &grads, optimizer, lr)?;

        loss_sum += value * chunk.len() as f64;
        let k = config.task.num_classes();
        correct += probs
            .data()
            .chunks(k)
            .zip(&batch.labels)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
    }
    let n = order.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

pub(crate) fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
