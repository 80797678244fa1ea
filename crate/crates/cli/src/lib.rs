//! Command-line pipeline over `mcgan-core`: one subcommand per stage, all
//! artifacts under a run directory, plus the rating-study HTTP server.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;
pub mod server;
