//! Config-driven runner, reports and comparisons for the reprobe laboratory.

pub mod config;
pub mod report;
pub mod runner;
pub mod selftest;

pub use config::{ConfigError, ExperimentConfig};
pub use runner::{run_experiment, RunArtifacts, RunError};
