use std::path::Path;

/// Failures mapped onto the process exit-code contract.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, bad config contents or failed validation (exit 2).
    #[error("{0}")]
    Usage(String),
    /// Reading or writing a file failed (exit 3).
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Checkpoint, dataset and config do not belong together (exit 4).
    #[error("{0}")]
    Incompatible(String),
    /// Training diverged (exit 1).
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Incompatible(_) => 4,
            CliError::Failed(_) => 1,
        }
    }
}
