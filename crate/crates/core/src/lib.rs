//! # icdex-core
//!
//! Algorithmic core for knowledge-grounded multi-label clinical code tagging.
//!
//! The crate is `no_std` (alloc required) and carries no IO: it covers
//! document chunking and vocabularies, knowledge-entry normalization,
//! diversity-based knowledge selection, a small trainable transformer
//! encoder with reverse-mode autodiff, the three label/context/knowledge
//! attention mechanisms, the convolutional prediction head, training with
//! early stopping and threshold search, multi-label metrics, and evidence
//! extraction for trace reports. File formats, remote clients, and the CLI
//! live in the companion `icdex` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod corpus;
pub mod diversity;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trace;
pub mod train;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
