//! File formats, reports and the command line around [`tmd_core`].
//!
//! Embeddings are stored as TMDE files ([`tmde`]) and trained models as TMDB
//! bundles ([`tmdb`]). [`pipeline`] holds the dataset-wide operations behind
//! the `tmd` binary.

pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod tmdb;
pub mod tmde;

pub use error::{Error, Result};
