use std::path::{Path, PathBuf};

/// Failures of the command-line driver, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing input {}: {reason}", path.display())]
    MissingInput { path: PathBuf, reason: String },

    #[error("{0}")]
    Domain(#[from] glucose_core::Error),

    #[error("invalid input {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("cannot write {}: {source}", path.display())]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::MissingInput { .. } | CliError::Format { .. } => 3,
            CliError::Domain(_) => 4,
            CliError::Write { .. } => 1,
        }
    }

    pub(crate) fn missing(path: &Path, reason: impl ToString) -> Self {
        CliError::MissingInput {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn format(path: &Path, reason: impl ToString) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn write(path: &Path, source: std::io::Error) -> Self {
        CliError::Write {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
