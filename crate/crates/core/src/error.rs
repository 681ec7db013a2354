use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {location}: {message}")]
    Format { location: String, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing {what}: {path}")]
    MissingArtifact { what: String, path: PathBuf },

    /// Artifacts on disk were produced under a different configuration.
    #[error("artifact {path} was built with config hash {found}, expected {expected}")]
    StaleArtifact {
        path: PathBuf,
        expected: String,
        found: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 1 for usage/argument problems, 2 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) => 1,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::MissingArtifact { .. }
            | Error::StaleArtifact { .. } => 2,
        }
    }
}
