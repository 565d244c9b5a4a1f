use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid part code {code} at pixel ({row}, {col}); expected one of 0, 1, 2, 3")]
    InvalidCode { code: u8, row: usize, col: usize },

    #[error("no part mask for image `{stem}` in {}", dir.display())]
    MissingMask { stem: String, dir: PathBuf },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid scene geometry: {0}")]
    InvalidGeometry(String),

    #[error("missing directory {}", .0.display())]
    MissingDirectory(PathBuf),

    #[error("dimension mismatch in record `{stem}`: {detail}")]
    DimensionMismatch { stem: String, detail: String },

    #[error("dataset is empty: {0}")]
    DatasetEmpty(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed journal: {0}")]
    Journal(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("image decode error in {context}: {source}")]
    Image {
        context: String,
        #[source]
        source: image::ImageError,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad failure class, used by the command line to pick an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) => ErrorKind::Config,
            Error::NumericFailure(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
