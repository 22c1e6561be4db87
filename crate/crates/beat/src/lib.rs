//! File formats and command-line front end for `beat-core`: tab-separated
//! pair datasets, binary checkpoints, run manifests and recall reports.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod report;
pub mod settings;

pub use error::{CliError, CliResult};
