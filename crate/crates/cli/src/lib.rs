//! Library side of the `fairproto` command so tests can call subcommands
//! directly.

pub mod commands;
pub mod config;
