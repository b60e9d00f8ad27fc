use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, shape mismatch, or an argument outside its domain.
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced a non-finite value.
    #[error("numeric error at {location}: {detail}")]
    Numeric { location: String, detail: String },

    /// A vector too close to the origin was handed to the sphere projection.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A caller broke an API contract (e.g. asked for the gradient of a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint version mismatch: file has version {found}, expected version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable code, used by the CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) => "E_CONFIG",
            Error::Numeric { .. } => "E_NUMERIC",
            Error::DegenerateInput(_) => "E_DEGENERATE",
            Error::Contract(_) => "E_CONTRACT",
            Error::Parse { .. } => "E_PARSE",
            Error::Integrity(_) => "E_INTEGRITY",
            Error::VersionMismatch { .. } => "E_VERSION",
            Error::Io { .. } => "E_IO",
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
