//! Command-line driver for tavlab experiments: config loading, artifact
//! writing and offline validation.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod validate;
