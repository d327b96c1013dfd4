use std::io;
use std::path::{Path, PathBuf};

use skge_core::Error as CoreError;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    /// A file that exists but cannot be trusted.
    #[error("{}: {source}", path.display())]
    Corrupt { path: PathBuf, source: CoreError },
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn corrupt(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Corrupt {
            path: path.to_path_buf(),
            source: CoreError::Corrupt(msg.into()),
        }
    }

    /// 2 for configuration or usage problems, 3 for numeric failure, 4 for
    /// corrupt data.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } => 2,
            CliError::Corrupt { .. } => 4,
            CliError::Core(e) => match e {
                CoreError::NonFinite(_) | CoreError::NonFiniteLoss { .. } => 3,
                CoreError::Corrupt(_) | CoreError::Data(_) => 4,
                CoreError::Shape { .. } | CoreError::Contract(_) | CoreError::Config(_) => 2,
            },
        }
    }
}
