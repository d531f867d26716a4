//! Filesystem, image, and command-line side of the `rga_core` re-identification
//! library: directory datasets, PNG masks, checkpoint and prototype files,
//! JSON reports, and the `rga` binary's subcommands.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod report;

pub use error::{Error, Result};
