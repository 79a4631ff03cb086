use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite gradient for parameter {index} at optimizer step {step} (value {value})")]
    NonFiniteGradient { index: usize, step: u64, value: f64 },

    #[error("teacher provider failed: {0}")]
    Transport(String),

    #[error("no cached teacher prediction for ({id}, {index})")]
    CacheMiss { id: String, index: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that a retry or a warmer cache could fix.
    pub fn is_provider_failure(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::CacheMiss { .. })
    }
}
