//! Crate-wide error type.

use std::fmt;

/// Errors produced by tensor math, masks, models, the engine, and training.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shape or axis mismatch in a tensor operation.
    Dimension(String),
    /// Index outside the valid range (embedding ids, slices, mask queries).
    IndexOutOfRange(String),
    /// An attention query row with no allowed key.
    DegenerateRow(String),
    /// Invalid parameter combination (config validation).
    InvalidParams(String),
    /// Batch with zero contributing rows.
    EmptyBatch(String),
    /// Training diverged (NaN loss) or internal state desynchronized.
    Training(String),
    /// Wire-protocol violation or transport failure.
    Protocol(String),
    /// Checkpoint container malformed or unreadable.
    Checkpoint(String),
    /// Run configuration rejected (unknown key, schema violation, missing file).
    Config(String),
    /// Filesystem or socket error, with context.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::IndexOutOfRange(m) => write!(f, "index out of range: {m}"),
            Error::DegenerateRow(m) => write!(f, "degenerate row: {m}"),
            Error::InvalidParams(m) => write!(f, "invalid parameters: {m}"),
            Error::EmptyBatch(m) => write!(f, "empty batch: {m}"),
            Error::Training(m) => write!(f, "training error: {m}"),
            Error::Protocol(m) => write!(f, "protocol error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
