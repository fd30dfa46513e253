//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: {msg}")]
    InvalidOp { op: &'static str, msg: String },

    #[error("instance bank is empty")]
    EmptyBank,

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn op(op: &'static str, msg: impl ToString) -> Self {
        Error::InvalidOp {
            op,
            msg: msg.to_string(),
        }
    }
}
