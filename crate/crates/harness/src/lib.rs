//! Experiment harness for the polystep optimizer: configs, seeded runs,
//! result records, the acceptance suite and the `polystep` CLI.

pub mod acceptance;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod recipes;
pub mod record;

pub use error::{HarnessError, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/harness.md")]
mod book_harness {}
