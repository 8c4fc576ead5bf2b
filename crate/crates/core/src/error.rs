use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes that cannot be combined by the requested op.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// NaN or infinity produced by a forward or backward computation.
    #[error("non-finite value produced by {op}")]
    Numeric { op: &'static str },

    /// Input outside the mathematical domain of an op (log of zero, probabilities outside [0, 1]).
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. differentiating a tensor that is not on the tape.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("modality inputs are not aligned: {0}")]
    Alignment(String),

    #[error("corrupt data in {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("incomplete record {record}: missing {field}")]
    IncompleteRecord { record: String, field: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by on-disk data rather than by the caller or the numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Corrupt { .. }
                | Error::IncompleteRecord { .. }
                | Error::Io { .. }
                | Error::Parse { .. }
                | Error::Alignment(_)
        )
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}
