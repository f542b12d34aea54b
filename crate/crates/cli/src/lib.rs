//! Configuration, orchestration and reporting for the `jumpbsde` command.

pub mod config;
pub mod output;
pub mod run;

pub use config::{parse_config, parse_str, Parsed, RunConfig, Violations};
pub use run::{run_experiment, Command, Options};
