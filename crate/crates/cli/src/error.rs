use std::io;

use rcbrt::compiler::{ArtifactError, CompileError};
use rcbrt::net::ClientError;
use rcbrt::{ErrorCode, RuntimeError};
use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, unreadable inputs or documents that fail validation.
    #[error("{0}")]
    Input(String),
    /// The host refused something: a busy port, an unwritable directory.
    #[error("{0}")]
    Environment(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Environment(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    pub fn input(ctx: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Input(format!("{ctx}: {e}"))
    }

    pub fn env(ctx: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Environment(format!("{ctx}: {e}"))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<CompileError> for CliError {
    fn from(e: CompileError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ArtifactError> for CliError {
    fn from(e: ArtifactError) -> Self {
        match e {
            ArtifactError::Io { .. } => CliError::Environment(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        match e.code() {
            ErrorCode::ExecFailed => CliError::Internal(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Io(_) => CliError::Environment(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Environment(e.to_string())
    }
}
