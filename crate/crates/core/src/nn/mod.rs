//! Minimal CNN engine: layers, SGD with momentum, per-layer activation
//! storage with compression hooks, and the training loop.

pub mod checkpoint;
pub mod layers;
pub mod network;
pub mod optim;
pub mod store;
pub mod train;

pub use network::{ConvStorage, LayerParams, LayerSpec, Network, StoragePolicy};
pub use optim::{sgd_momentum_step, OptimizerState};
pub use store::{ActivationStore, Slot};
pub use train::{train, RunStatus, TrainConfig, TrainMode, TrainOutcome, TrainingRecord};
