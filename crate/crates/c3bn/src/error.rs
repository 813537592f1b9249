use std::path::PathBuf;

/// Errors surfaced by the command line, each mapped to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {key}: {reason}")]
    Config { key: String, reason: String },
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("video {video}: {reason}")]
    Load { video: String, reason: String },
    #[error("{0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(c3bn_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) | CliError::Core(c3bn_core::Error::NonFinite { .. }) => 3,
            _ => 2,
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(video: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Load {
            video: video.into(),
            reason: reason.into(),
        }
    }
}

impl From<c3bn_core::Error> for CliError {
    fn from(e: c3bn_core::Error) -> Self {
        match e {
            c3bn_core::Error::Config { key, reason } => CliError::Config {
                key: key.into(),
                reason,
            },
            other => CliError::Core(other),
        }
    }
}
