use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("malformed image: {0}")]
    MalformedImage(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    FileIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::FileIo {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid_shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidShape {
            op,
            msg: msg.into(),
        }
    }
}
