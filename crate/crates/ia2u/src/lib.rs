//! File formats, corpus IO and subcommands around `ia2u-core`.

pub mod commands;
pub mod corpus;
pub mod error;
pub mod mosaic;
pub mod png_io;
pub mod report;
pub mod settings;

pub use error::{Error, Result};
