//! Losses, optimisation, training loops, evaluation, checkpoints and
//! metrics.
//!
//! Training is single-precision. Every random draw of a step (drop path,
//! sampled sub-networks, augmentation) comes from a stream keyed by the
//! seed and the step or `(epoch, sample)`, so an interrupted run resumed
//! from a checkpoint continues exactly as the uninterrupted one would.

mod checkpoint;
mod config;
mod loss;
mod metrics;
mod optim;
mod run;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, ModelSpec, OptimizerHeader, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{Schedule, TrainConfig};
pub use loss::{token_label_loss, LossVars};
pub use metrics::{MetricRecord, MetricsLog, StepRecord, METRICS_HEADER};
pub use optim::{clip_grad_norm, decays, lr_schedule, AdamW, LR_FLOOR};
pub use run::{
    count_correct, evaluate_top1, fit, fit_supernet, sample_step_choices, supernet_bounds, supernet_train_step,
    train_step, Hooks, SupernetEvaluator, TrainState,
};
