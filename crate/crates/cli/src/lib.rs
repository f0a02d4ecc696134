//! Commands behind the `segdg` binary: generate a synthetic benchmark, run
//! the strategy matrix, evaluate ensembles and tabulate the results.

pub mod commands;
pub mod config;
pub mod table;

pub use commands::{cmd_eval, cmd_generate, cmd_run, cmd_table, RunManifest};
pub use config::FileConfig;
