//! Command-line front end and on-disk sequence format.

pub mod commands;
pub mod format;

pub use commands::{run, Cli};
