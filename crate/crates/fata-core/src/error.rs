//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// An operation was handed tensors whose shapes do not conform.
    ShapeMismatch { op: &'static str, details: String },
    /// A documented precondition was violated.
    Contract(String),
    /// Invalid or inconsistent configuration.
    Config(String),
    /// Non-finite values where finite ones are required (diverged training,
    /// corrupted checkpoint, ...).
    Numerical(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, details } => {
                write!(f, "shape mismatch in `{op}`: {details}")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

/// Shorthand for `return Err(Error::Contract(format!(...)))`.
#[macro_export]
macro_rules! contract_bail {
    ($($arg:tt)*) => {
        return Err($crate::Error::Contract(format!($($arg)*)))
    };
}
