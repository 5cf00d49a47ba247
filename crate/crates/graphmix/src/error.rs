use std::io;
use std::path::PathBuf;

use crate::checkpoint::CheckpointError;

/// Errors of the command layer.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read `{}`: {source}", path.display())]
    Read { path: PathBuf, source: io::Error },
    #[error("cannot write `{}`: {source}", path.display())]
    Write { path: PathBuf, source: io::Error },
    #[error("invalid config `{}`: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("invalid checkpoint `{}`: {source}", path.display())]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("malformed metrics file `{}`: {message}", path.display())]
    Metrics { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] graphmix_core::Error),
}

impl Error {
    pub(crate) fn read(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Read { path, source }
    }

    pub(crate) fn write(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Write { path, source }
    }
}
