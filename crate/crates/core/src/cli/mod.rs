//! Configuration, presets and the commands behind the `tollflow` binary.

pub mod commands;
pub mod config;
pub mod verify;

pub use config::{parse_config, Artifact, ExperimentConfig, Preset};
