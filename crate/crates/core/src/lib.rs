//! Disentangled masked pre-training and multi-world fine-tuning for
//! multi-agent motion forecasting.
//!
//! This crate is `no_std` (with `alloc`). File formats, the training driver
//! and the command line live in the `decamp` crate.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod config;
pub mod embed;
pub mod error;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod scene;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
