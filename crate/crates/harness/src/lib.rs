//! Synthetic small-object scenes, a toy dense detector built from the
//! `smalldet-core` blocks, its training loop, checkpoints and evaluation.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod sweep;
pub mod train;

pub use error::{HarnessError, Result};
