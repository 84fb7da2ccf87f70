//! Command-line driver: configuration, orchestration and artifact output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{run, run_from_args, Cli, Command, Manifest};
pub use config::{load_config, ExperimentConfig};
