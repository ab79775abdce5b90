use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LfmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LfmError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("lambda integral diverges for the all-zero column")]
    DivergentIntegral,

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("combinatorial budget exceeded: {0}")]
    ResourceExhausted(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid tree: {0}")]
    Tree(String),

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl LfmError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LfmError::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LfmError::Io {
            path: path.into(),
            source,
        }
    }
}
