//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. The CLI maps each variant to
//! a stable one-word category on stderr so callers can dispatch on failures
//! without parsing prose.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/image/sinogram extents do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    /// A configuration value is missing, unknown, or out of range.
    #[error("config error: {0}")]
    Config(String),

    /// Precondition violation on an operation's inputs.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Container or report file could not be parsed.
    #[error("format error: {0}")]
    Format(String),

    /// Dataset manifest is inconsistent or refers to missing files.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Training could not start or continue.
    #[error("train error: {0}")]
    Train(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-parseable category, printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::Config(_) => "config",
            Error::Invalid(_) => "invalid",
            Error::Format(_) => "format",
            Error::Manifest(_) => "manifest",
            Error::Train(_) => "train",
            Error::Io { .. } => "io",
        }
    }
}
