//! Experiment harness: each subcommand produces one CSV table.

pub mod config;
pub mod experiments;
pub mod table;

pub use config::{Cli, Command, ExperimentConfig};
pub use experiments::run;
pub use table::Table;
