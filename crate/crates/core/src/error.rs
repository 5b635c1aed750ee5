use thiserror::Error;

/// Errors raised across parsing, model construction, and training.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: duplicate index {index:?}")]
    DuplicateIndex { line: usize, index: Vec<usize> },

    #[error("index {index:?} out of bounds for shape {shape:?}")]
    IndexOutOfBounds { index: Vec<usize>, shape: Vec<usize> },

    #[error("expected {expected} modes, found {found}")]
    ModeCount { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty tensor: {0}")]
    Empty(String),

    #[error("normalized reconstruction error undefined: evaluation values are all zero")]
    ZeroTruth,

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("report format error: {0}")]
    Report(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
