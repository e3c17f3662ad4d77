use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for {len} splats")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite parameter in splat {splat} ({field})")]
    NonFiniteSplat { splat: usize, field: &'static str },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),

    #[error(transparent)]
    Oracle(#[from] OracleError),

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Prefixes a config error's field path with `section`; other errors become config errors at `section`.
    pub fn within(self, section: &str) -> Self {
        match self {
            Error::Config { path, message } => Error::Config {
                path: format!("{section}.{path}"),
                message,
            },
            other => Error::Config {
                path: section.to_string(),
                message: other.to_string(),
            },
        }
    }
}

/// Failures surfaced by guidance oracles.
#[derive(Debug, Error)]
pub enum OracleError {
    #[error("transport failure talking to {endpoint} after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("oracle returned non-finite data at element {index}")]
    NonFinite { index: usize },

    #[error("oracle misconfigured: {0}")]
    Misconfigured(String),
}

impl OracleError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, OracleError::Transport { .. })
    }
}
