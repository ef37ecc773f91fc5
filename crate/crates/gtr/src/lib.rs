//! File formats, ingestion, analysis and the `gtr` command-line tool built
//! on [`gtr_core`].

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod ingest;
pub mod scene;
pub mod viz;

pub use error::{CliError, Result};
