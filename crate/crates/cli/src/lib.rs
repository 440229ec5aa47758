//! Command-line driver for the process-network pipeline.
//!
//! Each stage is a separate command that reads and writes files;
//! `run-all` chains them and records a [`manifest::RunManifest`].

pub mod app;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
