//! File formats, command line and HTTP inspection server around
//! [`lens_core`].
//!
//! Formats: checkpoints ([`checkpoint`]), dataset directories ([`dataset`]),
//! attention dumps ([`dump`]), run directories ([`run`]) and the analysis
//! tables written by [`report`]. Every JSON and CSV output carries a
//! `format_version` field (column, for CSV).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dump;
mod error;
pub mod io;
pub mod report;
pub mod run;
pub mod server;

pub use error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
