use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("non-finite value at index {index}")]
    NonFiniteValue { index: usize },

    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid label map: {0}")]
    InvalidLabel(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("selection is empty")]
    EmptySelection,

    #[error("eigensolver did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("exact CRF backend limited to {limit} pixels, got {pixels}")]
    BackendLimit { pixels: usize, limit: usize },

    #[error("every position is ignored, nothing contributes to the loss")]
    AllIgnored,

    #[error("evaluation tally is empty")]
    EmptyTally,

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss in {phase} epoch {epoch}")]
    NonFiniteLoss { phase: &'static str, epoch: usize },
}
