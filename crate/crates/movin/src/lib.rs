//! Files, checkpoints, streaming and the command line around `movin-core`.

pub mod blob;
pub mod bvh;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod storage;
pub mod stream;

pub use error::{Error, FormatError, Result};
