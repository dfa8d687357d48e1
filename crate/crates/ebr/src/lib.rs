//! File formats, configuration and experiment drivers around `ebr-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod index_file;
pub mod jsonl;
pub mod table1;

pub use ebr_core as core;
pub use error::{EbrError, Result};
