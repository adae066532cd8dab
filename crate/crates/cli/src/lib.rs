//! Configuration loading and subcommand bodies of the `ttdioc` binary.

pub mod config;
pub mod run;
