use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },

    #[error("{0} already exists; pass --force to overwrite")]
    Refused(PathBuf),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Stage { .. } => 4,
            CliError::Refused(_) => 5,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn stage(stage: &'static str, message: impl ToString) -> Self {
        CliError::Stage { stage, message: message.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;
