//! Training loop, checkpoints, ablations and run configuration.

pub mod ablate;
pub mod checkpoint;
mod config;
pub mod step;
pub mod train;

pub use ablate::{ablate, AblationRow};
pub use checkpoint::Checkpoint;
pub use config::{RunConfig, Variant};
pub use step::{train_step, IterRecord, Phase, TrainState};
pub use train::{evaluate, train, train_with, RunOutcome, TrainOptions};
