use std::path::PathBuf;

/// Errors produced anywhere in the inpainting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("batch norm in train mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("network is stochastic; switch to deterministic (inference) mode before probing")]
    NonDeterministic,

    #[error("objective {0} is diagnostic only and cannot be used for training")]
    DiagnosticOnly(&'static str),

    #[error("latent override index {index} out of range for latent dimension {dim}")]
    OverrideIndex { index: usize, dim: usize },

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("tensor {name}: shape mismatch, expected {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("missing stage-1 checkpoint: {0}")]
    MissingStage1(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, dim: &'static str, expected: usize, found: usize) -> Error {
    Error::Shape {
        op,
        dim,
        expected,
        found,
    }
}
