//! State-space scans, Mamba blocks, and the progressive RGB-thermal fusion
//! modules built on them.

pub mod dfm;
pub mod error;
pub mod mamba;
pub mod nn;
pub mod ofm;
pub mod ssm;
pub mod tracker;
pub mod verify;

pub use error::{CoreError, Result};
