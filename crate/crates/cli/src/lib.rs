//! Experiment runner for the naas sampler: configuration files, training,
//! evaluation, sampling and sweeps.

pub mod config;
pub mod run;

pub use config::{Benchmark, ConfigError, ExperimentConfig, Overrides};
