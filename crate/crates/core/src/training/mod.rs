//! Losses, optimizers, datasets, checkpoints, and the training loop.

pub mod checkpoint;
pub mod data;
pub mod loss;
pub mod optim;
pub mod train;

pub use data::Dataset;
pub use train::{evaluate, train, train_any, TrainConfig, TrainLog, TrainOutcome};
