//! Experiment runner for minimum-energy state estimation: configuration,
//! scenario simulation, observer runs, verification suites and CSV output.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod output;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use experiment::Experiment;
pub use verify::{Report, Suite};
