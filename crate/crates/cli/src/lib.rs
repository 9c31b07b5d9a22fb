//! Experiment driver for the glance lab: configuration, schedules, the
//! training loop, evaluation reports and the CLI command implementations.

pub mod commands;
pub mod config;
pub mod report;
pub mod schedule;
pub mod trainer;
