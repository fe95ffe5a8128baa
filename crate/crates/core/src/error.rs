//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or resolutions of two operands disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A byte stream does not follow its declared format.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// A keyed lookup (class, layer, parameter name) failed.
    #[error("lookup failed: {0}")]
    Lookup(String),

    /// Components were combined in an unsupported way.
    #[error("configuration error: {0}")]
    Configuration(String),

    /// Shape generation produced an empty or out-of-lattice shape.
    #[error("generation failed for parameter `{parameter}`: {message}")]
    Generation { parameter: String, message: String },

    /// A numeric quantity is undefined (zero denominator, non-finite loss).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Broad category used by command-line front ends to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parameter(_) | Error::Configuration(_) | Error::Lookup(_) => {
                ErrorKind::Configuration
            }
            Error::Dimension(_)
            | Error::Format { .. }
            | Error::Generation { .. }
            | Error::Io { .. }
            | Error::Json(_) => ErrorKind::Data,
            Error::Numeric(_) => ErrorKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Configuration,
    Data,
    Numeric,
}
