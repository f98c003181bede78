use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid model: {0}")]
    Model(String),
    #[error("certification failed: {0}")]
    Certification(String),
    #[error("missing prerequisite {path}: run `{stage}` first")]
    MissingPrerequisite { path: PathBuf, stage: &'static str },
    #[error("refused: estimated {estimated_bytes} bytes exceeds cap of {cap_bytes} bytes")]
    ResourceCap { estimated_bytes: u64, cap_bytes: u64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(simrel_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Certification(_) | CliError::Core(_) => 1,
            CliError::Parse { .. } | CliError::Model(_) => 2,
            CliError::MissingPrerequisite { .. } => 3,
            CliError::ResourceCap { .. } => 4,
            CliError::Io { .. } => 5,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<simrel_core::Error> for CliError {
    fn from(e: simrel_core::Error) -> Self {
        match e {
            simrel_core::Error::ResourceCap {
                estimated_bytes,
                cap_bytes,
            } => CliError::ResourceCap {
                estimated_bytes,
                cap_bytes,
            },
            other => CliError::Core(other),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
