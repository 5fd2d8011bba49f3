use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("event {index} at ({x}, {y}) lies outside {width}x{height}")]
    OutOfRange { index: usize, x: u32, y: u32, width: u32, height: u32 },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("unknown attribute code {0:?}")]
    Vocabulary(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for command-line front ends.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Incompatible(_) => 2,
            Error::Numeric(_) => 4,
            Error::Parse { .. }
            | Error::Format(_)
            | Error::OutOfRange { .. }
            | Error::Integrity(_)
            | Error::Vocabulary(_)
            | Error::Degenerate(_) => 3,
            Error::Io { .. } | Error::Image { .. } => 1,
        }
    }
}
