//! Experiment harness: configuration, preset experiments, output writers
//! and the command-line front end.

pub mod cli;
pub mod config;
pub mod emit;
pub mod experiments;
pub mod report;

pub use config::ExperimentConfig;
pub use report::{RunRecord, SummaryReport};
