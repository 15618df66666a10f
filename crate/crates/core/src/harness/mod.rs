//! Experiment configuration, synthetic data and the command implementations
//! behind the `combts` binary.

pub mod commands;
pub mod config;
pub mod synthetic;

pub use config::{DatasetSource, ExperimentConfig};
