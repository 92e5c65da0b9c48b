//! Front end for the pretraining and classification pipeline.
//!
//! Every command reads one [`RunConfig`], writes its artifacts under the
//! configured output directory and maps failures to stable exit codes
//! (see [`error::exit`]).

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;

pub use cli::{run, Cli};
pub use config::{DataConfig, RunConfig};
pub use error::{exit, CliError, CliResult};
