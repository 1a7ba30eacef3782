//! Reproducible command-line runs over the explanation pipeline.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod run;
