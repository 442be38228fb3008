//! Training, evaluation, checkpoints and parameter accounting.

mod checkpoint;
mod evaluate;
mod flops;
mod lr;
mod metrics;
mod params;
mod train;

pub use checkpoint::{read_checkpoint, save_checkpoint, Checkpoint, ManifestEntry};
pub use evaluate::{evaluate, evaluate_samples, predict_sample, EvalReport};
pub use flops::estimate_macs;
pub use lr::{LrSchedule, WarmupMode};
pub use metrics::ConfusionMatrix;
pub use params::{count_params, ModuleCounts, ParamReport};
pub use train::{train, LogRecord, StepLosses, TrainConfig, TrainOutcome, Trainer};
