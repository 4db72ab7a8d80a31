//! Configuration-driven sweeps, retraining and reporting on top of
//! [`lutmoe`].

pub mod commands;
pub mod config;
pub mod error;
pub mod multipliers;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
