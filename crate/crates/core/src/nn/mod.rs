//! Tensor math, the U-Net regressor, optimizers, training and checkpoints.

pub mod checkpoint;
pub mod layers;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod unet;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{lr_schedule, AdamConfig, Optimizer, OptimizerConfig, SgdConfig};
pub use tensor::{Scalar, Tensor};
pub use train::{train, EpochRecord, TrainOutcome};
pub use unet::{ParamSet, UNet, UNetConfig};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("checkpoint does not match architecture: {}", mismatched.join(", "))]
    Incompatible { mismatched: Vec<String> },
    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
