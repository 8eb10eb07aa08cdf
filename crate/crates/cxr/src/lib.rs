//! File formats, training driver, evaluation and the blinded review service
//! built on top of `cxr-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod evaluate;
pub mod metrics;
pub mod review;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
