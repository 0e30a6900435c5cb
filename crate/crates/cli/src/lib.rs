//! Operator surface for the `ambs` binary: run configuration, the
//! subcommands, metrics export, and the acceptance checks built on them.

pub mod acceptance;
pub mod commands;
pub mod config;

use thiserror::Error;

/// Errors of a subcommand, each mapped to the process exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration (exit 1).
    #[error("configuration error: {0}")]
    Config(String),
    /// A check ran and found violations (exit 2).
    #[error("verification failed: {0}")]
    Verification(String),
    /// Training broke down numerically (exit 3).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Anything else (I/O, serialization, library errors) (exit 1).
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Other(_) => 1,
            CliError::Verification(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

macro_rules! other_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Other(e.into())
            }
        })*
    };
}

other_from!(std::io::Error, serde_json::Error, csv::Error, ambs_core::agent::AgentError, ambs_core::bisim::BisimError, ambs_core::losses::LossError, ambs_core::ot::OtError, ambs_core::replay::ReplayError);
