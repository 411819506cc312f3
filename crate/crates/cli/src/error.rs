use thiserror::Error;

/// Command failure, categorized for the process exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Inputs on disk do not satisfy a command's preconditions.
    #[error("validation error: {0}")]
    Validation(String),
    #[error(transparent)]
    Runtime(#[from] cfrc_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration and validation errors, 1 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Validation(_) => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 1,
        }
    }
}
