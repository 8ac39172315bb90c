use std::io;
use std::path::PathBuf;

use crate::mseg::FormatError;

#[derive(Debug, thiserror::Error)]
pub enum BootError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{origin}:{line}: {msg}")]
    Config { origin: String, line: usize, msg: String },
    #[error("{}:{line}: {msg}", path.display())]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("{}: {msg}", path.display())]
    Snapshot { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] mlb_seg_core::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, BootError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> BootError {
    let path = path.into();
    move |source| BootError::Io { path, source }
}
