//! Command-line harness: trace files, run configuration and reports.

pub mod cli;
pub mod commands;
pub mod config;
pub mod report;
pub mod trace;
