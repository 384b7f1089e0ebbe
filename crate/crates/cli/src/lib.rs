//! Command-line interface and HTTP service over the core pipeline.

pub mod args;
pub mod artifacts;
pub mod commands;
pub mod inputs;
pub mod manifest;
pub mod service;
