//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MpcnError {
    /// Tensor or voxel dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Malformed input stream; `offset` is the byte where parsing failed.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// Invalid configuration (bad hyperparameter, overlapping splits, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Procedural generation produced a degenerate shape.
    #[error("generation error: {0}")]
    Generation(String),

    /// One or more dataset rows failed to load; every failure is listed.
    #[error("dataset load failed:\n{}", .0.join("\n"))]
    DatasetLoad(Vec<String>),

    /// A loss became non-finite; training is aborted with the batch context.
    #[error("non-finite loss at epoch {epoch} batch {batch}: rec={rec} nce={nce}")]
    Diverged {
        epoch: usize,
        batch: usize,
        rec: f64,
        nce: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MpcnError>;

impl MpcnError {
    pub fn shape(msg: impl Into<String>) -> Self {
        MpcnError::ShapeMismatch(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        MpcnError::Config(msg.into())
    }
}
