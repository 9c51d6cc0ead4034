//! Library side of the `cryoflow` binary: configuration and subcommands.

pub mod commands;
pub mod config;

pub use config::Config;
