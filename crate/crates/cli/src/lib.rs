//! Command-line and HTTP front ends for the query engine.

pub mod api;
pub mod commands;
pub mod config;
