//! Command-line harness around `elip_core`: reproducible runs over seeded
//! or PPM images, complexity reports and text-pruning ablations.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod images;

pub use config::{RawConfig, RunConfig};
pub use error::{CliError, CliResult};
