use std::io;

use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum AsaError {
    /// A caller broke an operation's documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The file is not in the expected container format.
    #[error("format error: {0}")]
    Format(String),

    /// The container header is valid but its payload is inconsistent.
    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = AsaError> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> AsaError {
    AsaError::Contract(msg.into())
}
