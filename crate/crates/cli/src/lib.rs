//! Library side of the `ainet` command: the cost benchmark and the command
//! dispatch, kept here so both can be tested without spawning the binary.

pub mod app;
pub mod bench;
pub mod error;

pub use error::{CliError, Result};
