//! Command line, configuration files and run artifacts around `rome-core`.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod dot;
