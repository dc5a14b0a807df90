use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the matching, propagation and evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("layout error on {axis}: {detail}")]
    Layout { axis: &'static str, detail: String },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("state error: {0}")]
    State(String),
    #[error("pyramid error: {0}")]
    Pyramid(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("scheduling error: {0}")]
    Scheduling(String),
    #[error("phantom spec error: {0}")]
    Spec(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by malformed or incompatible input data rather
    /// than by configuration or internal state.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format(_)
                | Error::Truncated { .. }
                | Error::Unsupported(_)
                | Error::Dimension(_)
                | Error::Label(_)
                | Error::Pyramid(_)
        )
    }
}

macro_rules! ensure_dims {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Dimension(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure_dims;
