use std::path::PathBuf;

use nighttrack_core::CoreError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EvalError {
    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 1 for bad configuration, 3 for numerical failure,
    /// 2 for everything data-related.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(CoreError::Config(_)) => 1,
            Self::Core(CoreError::Numerical(_)) => 3,
            _ => 2,
        }
    }
}
