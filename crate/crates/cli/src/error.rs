use std::path::PathBuf;

use posbias::ErrorKind;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing {path}; run `posbias {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("{path}: produced by config {found}, current config is {expected} (pass --allow-hash-mismatch to merge anyway)")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: {message}")]
    BadArtifact { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Failed(String),
    #[error("no corpus could be analyzed")]
    NothingParsed,
    #[error(transparent)]
    Core(#[from] posbias::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Failed(_) | CliError::HashMismatch { .. } | CliError::NothingParsed => 1,
            CliError::MissingArtifact { .. } | CliError::BadArtifact { .. } | CliError::Io { .. } => 2,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Validation => 1,
                ErrorKind::Io => 2,
                ErrorKind::Numerical => 3,
            },
        }
    }
}

/// Lifts any core module error into [`CliError`].
pub fn core<E: Into<posbias::Error>>(e: E) -> CliError {
    CliError::Core(e.into())
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
