use std::path::{Path, PathBuf};

use beat_core::BeatError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] BeatError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        CliError::Format { path: path.to_path_buf(), message: message.into() }
    }

    /// 2 for configuration or argument problems, 3 for divergence, 4 for
    /// unreadable, malformed or inconsistent input files.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(BeatError::Diverged { .. }) => 3,
            CliError::Core(BeatError::Validation(_)) => 4,
            CliError::Core(_) => 2,
            CliError::Io { .. } | CliError::Format { .. } => 4,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
