//! Command-line facing driver: configuration, the training loop, run
//! directories, sweeps, ablations and plot exports.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod plot;
pub mod run;
pub mod trainer;

pub use config::{RuleKind, TrainingConfig};
pub use trainer::{RunLog, StepRecord, TrainState, Trainer};
