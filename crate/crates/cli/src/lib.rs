//! Run-config driven front end over the `entropic` solvers.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{reevaluate, run, Command, Outcome, Overrides};
pub use config::RunConfig;
pub use output::Summary;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Solver(_) => 1,
            CliError::Config { .. } | CliError::Io(_) => 2,
        }
    }
}
