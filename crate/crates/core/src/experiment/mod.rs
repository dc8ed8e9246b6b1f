//! Configuration-driven studies.

pub mod config;
pub mod plot;
pub mod studies;
pub mod workbench;

pub use config::ExperimentConfig;
pub use studies::{run_experiments, run_studies, RunOutputs, Study};
pub use workbench::Workbench;
