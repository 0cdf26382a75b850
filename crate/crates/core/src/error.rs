use std::path::PathBuf;

use pfiqa_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PfiqaError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed manifest {}:{line}: {msg}", .path.display())]
    MalformedManifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("unparseable label {label:?} at {}:{line}", .path.display())]
    UnparseableLabel {
        path: PathBuf,
        line: usize,
        label: String,
    },
    #[error("{source_id} is {height}x{width}, need at least {min}x{min}")]
    Resolution {
        source_id: String,
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("input is {height}x{width}, expected {expected}x{expected}")]
    InputResolution {
        height: usize,
        width: usize,
        expected: usize,
    },
    #[error("degenerate weights: sum {0} is not above the guard")]
    DegenerateWeights(f64),
    #[error("constant input: correlation is undefined for zero variance")]
    ConstantInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} {what}, got {got}")]
    TooFew {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("image decode {}: {msg}", .path.display())]
    Image { path: PathBuf, msg: String },
    #[error(transparent)]
    Tensor(TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for PfiqaError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::DegenerateWeights { sum, .. } => PfiqaError::DegenerateWeights(sum),
            TensorError::ShapeMismatch { .. } => PfiqaError::ShapeMismatch(e.to_string()),
            TensorError::Checkpoint(msg) => PfiqaError::Checkpoint(msg),
            other => PfiqaError::Tensor(other),
        }
    }
}

/// Coarse failure classes, used by the command line for exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl PfiqaError {
    pub fn class(&self) -> ErrorClass {
        use PfiqaError::*;
        match self {
            Config(_) => ErrorClass::Usage,
            DegenerateWeights(_) | ConstantInput | NonFinite { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, PfiqaError>;
