//! Experiment harness: configuration, dataset readers, checkpoints and the
//! end-to-end runner behind the `sparse-at` command line.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experiment;

pub use error::{HarnessError, Result};
