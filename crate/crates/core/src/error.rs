use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {operand}: expected {expected:?}, got {actual:?}")]
    Dimension {
        operand: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("mask selects no position")]
    InvalidMask,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("function evaluation returned a non-finite value ({0})")]
    Evaluation(f64),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss is {value}")]
    Diverged { step: u64, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(operand: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Dimension {
            operand: operand.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
