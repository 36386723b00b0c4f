use std::io;

use thiserror::Error;

/// Errors raised across the engine.
///
/// The variants line up with the CLI exit codes: configuration, data and I/O
/// problems are usage-level failures, `Training` is the NaN/Inf abort path.
#[derive(Debug, Error)]
pub enum HgError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl HgError {
    pub fn config(msg: impl Into<String>) -> Self {
        HgError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        HgError::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        HgError::Usage(msg.into())
    }

    /// Process exit code for this error: 2 for a training abort, 64 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HgError::Training(_) => 2,
            _ => 64,
        }
    }
}

pub type Result<T> = std::result::Result<T, HgError>;
