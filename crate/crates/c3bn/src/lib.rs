//! File formats, parallel execution, and the `c3bn` command line on top of
//! [`c3bn_core`].

pub mod commands;
pub mod error;
pub mod exec;
pub mod formats;
pub mod manifest;
pub mod plot;
pub mod report;
pub mod settings;

pub use error::{CliError, Result};
