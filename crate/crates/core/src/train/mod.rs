//! Optimization loop, learning-rate schedule, training history and evaluation.

mod config;
mod evaluate;
mod log;
mod trainer;

pub use config::{TrainConfig, DESK_LR_END, DESK_LR_START};
pub use evaluate::{evaluate, predict_heads, EvalOptions, EvalReport};
pub use log::{EpochRecord, StepRecord, TrainLog};
pub use trainer::{train, Trainer, CHECKPOINT_FILE, VELOCITY_PREFIX};
