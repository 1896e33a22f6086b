//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, inference, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid caller-supplied data: dimension mismatches, empty sequences,
    /// out-of-range labels, bad decode widths.
    #[error("invalid input: {0}")]
    Input(String),

    /// A request inconsistent with the model structure, e.g. a path prefix
    /// that does not exist in the topology or a depth out of range.
    #[error("structural error: {0}")]
    Structure(String),

    /// Non-finite weights or inputs, or a computation that produced NaN.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An operation invoked on a value that cannot support it, e.g. asking
    /// for a posterior from a max-product evaluation.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed data file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An exhaustive oracle refused an input larger than its budget.
    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub fn budget(msg: impl Into<String>) -> Self {
        Error::Budget(msg.into())
    }
}
