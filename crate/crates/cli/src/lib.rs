//! Experiment runner for the `masseg` command line tool: configuration,
//! multi-seed sequence runs, standalone metric reports and cross-strategy
//! comparison tables.

pub mod compare;
pub mod config;
pub mod error;
pub mod run;

pub use config::ExperimentConfig;
pub use error::CliError;
