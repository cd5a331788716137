//! File formats, run configuration, experiments and command implementations
//! for the `afflow` toolkit. The numerical core is `afflow-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiments;
pub mod format;
pub mod state;

pub use error::{CliError, CliResult, FormatError};
