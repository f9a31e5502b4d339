//! Subcommand implementations behind the `rcbrt` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::*;
pub use config::{CliConfig, ConfigError};
pub use error::CliError;
