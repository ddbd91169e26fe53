//! Experiment runner: generate synthetic task suites, train, evaluate,
//! and export plot-ready CSV diagnostics.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::Console;
pub use config::ExperimentConfig;
pub use error::CliError;
