//! Command implementations behind the `smoothflow` binary.
//!
//! Every command returns a short human summary for stdout; machine-readable
//! results go to files only.

use std::fmt;

pub mod commands;
pub mod config;

pub use config::{RunConfig, RUN_CONFIG_VERSION};

/// Failure classes mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid input: exit code 2.
    Config(String),
    /// Failure while doing the work: exit code 3.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub(crate) fn runtime(e: impl fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}
