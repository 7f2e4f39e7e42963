//! Error taxonomy shared by the whole pipeline.
//!
//! Variants are grouped so the CLI can map them onto stable exit codes:
//! validation failures (bad arguments, malformed configs, impossible
//! requests) are distinct from I/O and container-format problems, which
//! are distinct from numerical breakdowns discovered mid-computation.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied inconsistent or out-of-range inputs.
    #[error("validation error: {0}")]
    Validation(String),

    /// A file or stream could not be read or written.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A container or model file is structurally malformed.
    #[error("format error: {0}")]
    Format(String),

    /// A container declared more payload than it carries.
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    /// A versioned file was written by an unsupported format revision.
    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    /// JSON (de)serialization failed.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A numerical routine could not produce a trustworthy result.
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code for the CLI: 1 validation, 2 I/O or format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 1,
            Error::Io(_)
            | Error::Format(_)
            | Error::Truncated { .. }
            | Error::Version { .. }
            | Error::Json(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}
