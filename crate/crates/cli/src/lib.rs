//! Experiment driver for the distill-lab numerical laboratory.
//!
//! Each run mode turns an [`config::ExperimentConfig`] into one CSV table
//! (plus line charts) under the output directory.

pub mod config;
pub mod output;
pub mod run;
pub mod theory;
pub mod toy;
pub mod verify;
