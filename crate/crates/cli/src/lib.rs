//! Experiment driver: configuration files, checkpoints, metrics and the
//! `train`, `gradcheck`, `params` and `sweep` commands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use error::CliError;
