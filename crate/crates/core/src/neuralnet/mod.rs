//! The two-path classifier: layer kernels, the network graph, training,
//! prediction, gradient checking and the model file.

use std::io;

use thiserror::Error;

pub mod arch;
pub mod gradcheck;
pub mod layers;
pub mod lstm;
pub mod model_file;
pub mod network;
pub mod optim;
pub mod train;

pub use arch::{ArchitectureConfig, LayerSpec, REFERENCE_TOKEN_COUNT};
pub use model_file::{load_model, save_model};
pub use network::Network;
pub use optim::{Adam, AdamConfig};
pub use train::{train, Detector, Model, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("token set mismatch: model expects {expected:016x}, tokens are {actual:016x}")]
    TokenSetMismatch { expected: u64, actual: u64 },
    #[error("corrupt model: {0}")]
    CorruptModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
