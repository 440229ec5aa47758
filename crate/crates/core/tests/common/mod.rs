//! Fixtures and reference implementations shared by the integration tests
//! of both crates.
#![allow(dead_code)]

pub mod link_table;
pub mod oracles;
pub mod prompts;
pub mod scenarios;
