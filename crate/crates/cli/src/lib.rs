//! Command-line driver: configuration handling and the `train`, `eval`,
//! `bench`, `inspect` and `synth` subcommands.

pub mod bench;
pub mod commands;
pub mod config;
pub mod exit;

pub use bench::{cmd_bench, BenchReport};
pub use commands::{cmd_eval, cmd_inspect, cmd_synth, cmd_train};
pub use config::{Overrides, RunConfig, Variant};
pub use exit::CliError;
