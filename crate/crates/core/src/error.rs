use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up (channel counts, spatial extents, layouts).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed binary input; `offset` is the byte position of the problem.
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Semantically invalid data, e.g. a label outside the class range.
    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    /// An artifact was produced under a different configuration.
    #[error("config hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    /// A loss or gradient became non-finite.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::HashMismatch { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
