//! Experiment harness: configuration, score-model training, reconstruction
//! sweeps, tables and figures.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod figures;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
