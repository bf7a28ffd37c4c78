//! Configuration, run directories and the CLI commands.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod run;

pub use config::ExperimentConfig;
pub use run::{RunRecord, RunRoot};
