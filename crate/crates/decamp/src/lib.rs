//! File formats, training drivers and checkpoints for `decamp-core`.

pub mod checkpoint;
pub mod error;
pub mod files;
pub mod pipeline;

pub use decamp_core;
pub use error::{Error, Result};
