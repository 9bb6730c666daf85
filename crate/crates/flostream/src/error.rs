//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by configuration, I/O and pipeline code.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or contradictory configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// Mismatched tensor, frame or flow shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed file contents (bad magic, truncated data, inconsistent headers).
    #[error("format error: {0}")]
    Format(String),

    /// Non-finite values where finite ones are required (flows, losses).
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Operation not valid in the current state (e.g. push after flush).
    #[error("invalid state: {0}")]
    State(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
