use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] tmd_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version { kind: &'static str, found: u8, expected: u8 },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes a message with the file it concerns.
    pub fn in_file(self, path: &std::path::Path) -> Self {
        match self {
            Error::Io { .. } => self,
            Error::Core(ref e) if e.is_numeric() => self,
            other => Error::Format(format!("{}: {other}", path.display())),
        }
    }

    /// 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(e) if e.is_numeric() => 2,
            _ => 1,
        }
    }
}
