//! Core numerics for weakly-supervised chest radiograph report generation.
//!
//! Everything here is pure computation over owned buffers and only needs
//! `alloc`: the reverse-mode autodiff graph, image preprocessing and the
//! synthetic corpus, tokenization, the densely connected encoder, the
//! attention LSTM decoder, beam search, the CIDEr metric, and the optimizer
//! pieces of the training loop. File formats, the CLI and the review service
//! live in the `cxr` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod autodiff;
pub mod beam;
pub mod cider;
pub mod decoder;
pub mod encoder;
mod error;
pub mod image;
pub mod math;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
