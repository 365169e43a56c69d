//! Error type shared across the toolkit.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CbctError {
    /// A caller-supplied argument violates an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Data read from disk or produced upstream is inconsistent.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Configuration file is missing, malformed, or self-contradictory.
    #[error("config error: {0}")]
    Config(String),

    /// A verification harness (e.g. the gradient checker) hit non-finite values.
    #[error("check failed: {0}")]
    CheckFailed(String),

    /// The training loss became non-finite.
    #[error("training diverged at epoch {epoch}, step {step}")]
    TrainingDiverged { epoch: usize, step: usize },

    /// A statistical test received input it cannot decide on (e.g. all-zero differences).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CbctError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CbctError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CbctError>;
