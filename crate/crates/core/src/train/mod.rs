//! Training recipe: Adam, plateau learning-rate decay, early stopping, the
//! epoch loop and evaluation.

mod adam;
mod config;
mod eval;
mod fit;
mod history;
mod schedule;

pub use adam::{adam_step, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use config::TrainConfig;
pub use eval::{eval_pass, evaluate, EvalOutput};
pub use fit::{
    checkpoint_metadata, epoch_order, read_checkpoint_metadata, train, TrainOptions, TrainOutcome,
    BEST_CHECKPOINT, CHECKPOINT_DIR, HISTORY_FILE, LAST_CHECKPOINT, META_EPOCH, META_NORMALIZATION, META_TASK,
};
pub use history::{EpochRecord, StopReason, TrainHistory};
pub use schedule::{DecayEvent, EarlyStopper, Monitor, PlateauScheduler, StopCheck};
