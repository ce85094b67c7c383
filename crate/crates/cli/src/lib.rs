//! Experiment runner for the `fedmeta` simulator: config parsing, the
//! `train`, `personalize`, `decompose` and `report` commands, and their
//! on-disk formats.

pub mod config;
pub mod decompose;
pub mod output;
pub mod personalize;
pub mod report;
pub mod train;

pub use config::ExperimentConfig;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// The command ran but failed (divergence, missing or mismatched files); exit code 1.
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

impl From<fedmeta::Error> for CliError {
    fn from(e: fedmeta::Error) -> Self {
        CliError::Domain(e.to_string())
    }
}
