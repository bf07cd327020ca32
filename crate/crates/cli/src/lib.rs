//! Command-line pipeline around `rtgen-core`: dataset generation, training,
//! evaluation, single-image inference and ablation sweeps.

pub mod commands;
pub mod config;
pub mod error;

pub use error::{CliError, CliResult};
