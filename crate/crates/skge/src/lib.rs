//! File formats, configuration and command-line tools around `skge-core`.

pub mod commands;
pub mod config;
pub mod drivelog;
pub mod error;
pub mod io;

pub use error::{CliError, Result};
