//! Library side of the `bevfuse` command line tool.
//!
//! Everything a subcommand does lives here, so integration tests can drive
//! commands in-process; `main.rs` only parses arguments and maps the error
//! category to a process exit code.

pub mod commands;
pub mod config;

use thiserror::Error;

/// Failure categories, each with a dedicated process exit code:
/// configuration problems exit 2, dataset/model-file problems exit 3,
/// self-check failures exit 4.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("check failure: {0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Check(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub use commands::{run_bench, run_check, run_eval, run_gen, run_train};
pub use config::{load_config, parse_config, AppConfig};
