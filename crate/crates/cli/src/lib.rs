//! Experiment runner: configuration schema, run orchestration and
//! persistence, baseline comparisons, snapshot diagnostics and plot data.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_compare, cmd_diagnose, cmd_emit_plots, cmd_euclid, cmd_run, exit_code, load_run, Baseline,
    CompareReport, DiagnoseOptions, RunOutcome,
};
pub use config::RunConfig;
