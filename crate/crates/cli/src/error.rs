use std::path::PathBuf;

use thiserror::Error;

/// Failures of a subcommand, each tied to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, a bad config file or an unknown name (exit 64).
    #[error("{0}")]
    Usage(String),

    /// Input data that cannot be read or does not fit the declared spaces (exit 65).
    #[error("{0}")]
    Data(String),

    /// A checked law or bound did not hold (exit 2).
    #[error("{0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invariant(_) => 2,
            CliError::Usage(_) => 64,
            CliError::Data(_) | CliError::Io { .. } => 65,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Library errors raised while processing input data.
pub fn data(context: &str) -> impl Fn(probmorph::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{context}: {e}"))
}

/// Library errors raised while building the experiment from the config.
pub fn usage(context: &str) -> impl Fn(probmorph::Error) -> CliError + '_ {
    move |e| CliError::Usage(format!("{context}: {e}"))
}

pub type CliResult<T> = Result<T, CliError>;
