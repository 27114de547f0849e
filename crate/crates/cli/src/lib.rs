//! The `scsf` command-line tool: single-site fits, tuning studies, fleet
//! runs and synthetic data, each writing its artifacts to an output
//! directory. File formats are described in `docs/formats.md`.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod load;
pub mod svg;

pub use config::Cli;
pub use error::{CliError, Result};

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    commands::run(cli.command)
}
