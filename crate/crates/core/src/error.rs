use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("time {time} outside the encodable range [{lo}, {hi}]")]
    TimeOutOfRange { time: f64, lo: f64, hi: f64 },

    #[error("integration from frame {start} with {steps} step(s) leaves the sequence (frames 0..={last})")]
    OutOfSequence { start: usize, steps: usize, last: usize },

    #[error("{0} is not a frame timestamp of the sequence")]
    NotAFrameTime(f64),

    #[error("empty point cloud: {0}")]
    EmptyCloud(&'static str),

    #[error("{path}: {field}: {message}")]
    Format {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
