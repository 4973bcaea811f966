//! Error type shared across the library.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An operation received tensors whose shapes do not conform.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An index (token id, label id, position) fell outside its valid range.
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    /// A configuration value is invalid.
    Config(String),
    /// Input data is malformed or violates a precondition.
    Data(String),
    /// A numeric failure (NaN/Inf) was detected during training.
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::IndexOutOfRange { what, index, limit } => {
                write!(f, "{what}: index {index} out of range (limit {limit})")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}
