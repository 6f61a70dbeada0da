use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("batch norm '{0}' evaluated before any training step")]
    UninitializedStats(String),

    #[error("warp inversion failed: {0}")]
    Inversion(String),

    #[error("malformed data in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
