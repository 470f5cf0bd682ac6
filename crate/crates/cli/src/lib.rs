//! Experiment driver for the `ticl` core: typed configuration, stream
//! generation, single runs, ablation sweeps, linear probing and reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod svg;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
