//! Library side of the `fbsde` command: config parsing and run dispatch.

pub mod config;
pub mod run;
