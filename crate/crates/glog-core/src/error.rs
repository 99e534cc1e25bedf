//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor ops, model wiring, metrics and the harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an op contract) disagree on shape.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Convolution kernels must have odd spatial extent.
    #[error("kernel size must be odd, got {0}")]
    EvenKernel(usize),

    /// `backward` was called on a node that is not a scalar.
    #[error("backward requires a scalar loss node, got {numel} elements")]
    NonScalarLoss { numel: usize },

    /// A structural constraint of the model was violated; the message names it.
    #[error("constraint violated: {0}")]
    Constraint(String),

    /// An invalid argument outside the shape/constraint categories.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: training diverged")]
    Diverged { epoch: usize, batch: usize },

    /// A dataset operation received no samples.
    #[error("empty dataset")]
    EmptyDataset,

    /// Checkpoint encoding/decoding failed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
