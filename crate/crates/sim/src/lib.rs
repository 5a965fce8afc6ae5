//! Experiment harness for the FEEL CSI-feedback simulator: configuration,
//! dataset/model/payload files, experiment grids and CSV output.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod formats;
pub mod report;

pub use config::{ExperimentConfig, ExperimentId};
pub use error::{SimError, SimResult};
pub use experiments::{run_experiment, write_outputs, DataSource, Framework, MetricsReport};
