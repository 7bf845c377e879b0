//! Datasets, run configuration, checkpoints and experiment orchestration.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod run;
