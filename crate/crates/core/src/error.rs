use std::path::PathBuf;

/// Errors raised across the pipeline.
///
/// Variants map onto the error classes of each operation contract so that
/// callers (and the CLI's machine-readable error output) can tell an invalid
/// argument apart from an out-of-bounds geometry or a broken artifact.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable code used in machine-readable error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::OutOfBounds(_) => "out_of_bounds",
            Error::Consistency(_) => "consistency",
            Error::Capacity(_) => "capacity",
            Error::Configuration(_) => "configuration",
            Error::Sequencing(_) => "sequencing",
            Error::NonFinite(_) => "non_finite",
            Error::NotFound(_) => "not_found",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
