use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("batch norm needs at least two values per channel in train mode")]
    DegenerateBatch,

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("backward called without a cached forward pass ({0})")]
    MissingCache(&'static str),

    #[error("domain registry: {0}")]
    Registry(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("format: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("{kind} generator supports at most {max} classes, got {requested}")]
    Capacity {
        kind: &'static str,
        max: usize,
        requested: usize,
    },
}

/// Coarse failure class, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Data(_)
            | Error::Format(_)
            | Error::Io { .. }
            | Error::InvalidLabel { .. }
            | Error::Capacity { .. } => ErrorKind::Data,
            Error::Numerical(_) => ErrorKind::Numerical,
            _ => ErrorKind::Config,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
