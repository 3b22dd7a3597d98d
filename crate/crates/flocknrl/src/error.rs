use std::io;
use std::path::{Path, PathBuf};

use flocknrl_core::fp::FpError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: line {line}: {msg}", path.display())]
    Format { path: PathBuf, line: usize, msg: String },
    #[error("missing artifact {}", .0.display())]
    Missing(PathBuf),
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Fp(FpError),
    #[error("{0}")]
    Runtime(String),
}

impl Error {
    /// Process exit status: 1 for configuration problems, 2 for everything
    /// that went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
        move |source| {
            if source.kind() == io::ErrorKind::NotFound {
                Error::Missing(path.to_path_buf())
            } else {
                Error::Io {
                    path: path.to_path_buf(),
                    source,
                }
            }
        }
    }

    pub(crate) fn csv(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
        move |source| match source.kind() {
            csv::ErrorKind::Io(e) if e.kind() == io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
            _ => Error::Csv {
                path: path.to_path_buf(),
                source,
            },
        }
    }
}

impl From<FpError> for Error {
    fn from(e: FpError) -> Self {
        match e {
            FpError::InvalidConfig(msg) => Error::Config(msg),
            other => Error::Fp(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
