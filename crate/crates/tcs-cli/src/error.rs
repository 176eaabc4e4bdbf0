use std::path::PathBuf;
use std::process::ExitCode;

use tcs_core::codec::CodecError;
use tcs_core::fedsim::{ConfigError, SimError};

/// Command failures, each mapped to a stable exit code: 2 for configuration
/// and input problems, 3 for diverged training, 4 for malformed payload
/// bytes, 1 for filesystem trouble while writing artifacts.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError::Config(message.into())
    }

    /// Configuration error in the same shape the simulator uses, so every
    /// exit-2 message names the offending field.
    pub fn field(field: &str, message: impl std::fmt::Display) -> Self {
        CliError::Config(format!("invalid config field `{field}`: {message}"))
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> ExitCode {
        let code: u8 = match self {
            CliError::Io { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Malformed(_) => 4,
        };
        ExitCode::from(code)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => CliError::Config(c.to_string()),
            SimError::Diverged { .. } => CliError::Diverged(e.to_string()),
        }
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        CliError::Malformed(e.to_string())
    }
}
