//! Experiment runner: configuration, the staged pipeline, artifacts with a
//! content-hash manifest, and summary tables.

pub mod artifacts;
pub mod config;
pub mod pipeline;
pub mod tables;

pub use artifacts::{Layout, Manifest};
pub use config::{ConfigErrors, ExperimentConfig};
pub use pipeline::{parse_stages, run_experiment, RunArtifacts, Stage, StageError};
