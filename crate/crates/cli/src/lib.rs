//! Configuration-driven runs of the measure-flow laboratory.

pub mod config;
pub mod error;
pub mod output;
pub mod runner;

pub use config::{parse_config, to_toml, ExperimentConfig};
pub use error::{CliError, EXIT_FAILURE, EXIT_PASS, EXIT_USAGE};
pub use output::{csv, emit_plot_data, summary_json, write_outputs};
pub use runner::{run, run_with_threads, ReportBody, RunReport};
