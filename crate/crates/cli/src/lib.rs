//! Command-line front end for the adaptive execution simulator: TOML
//! configuration, experiment orchestration and CSV/JSON output.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{run, Cli, Command, CommonArgs};
pub use config::ExperimentConfig;
pub use error::CliError;
