//! Crate-wide error type.
//!
//! Variants map onto the CLI exit codes: `Numeric` exits with 2, everything
//! else non-IO exits with 1.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    Shape(String),
    /// Invalid configuration or argument.
    Config(String),
    /// Non-finite value or other numeric failure.
    Numeric(String),
    /// File format violation (bad magic, version, truncation).
    Format(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Process exit code for the CLI: 1 = validation/config, 2 = numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}
