//! Cross-modal matching between point-cloud-like and text-like token sets.
//!
//! The crate is `no_std` with `alloc`. It carries the numerical pieces of the
//! pipeline: a small reverse-mode gradient tape ([`graph`]), the patch position
//! embedding ([`posenc`]), dual-attention pooling ([`dap`]), the batch
//! similarity losses ([`rncl`]), a synthetic dataset generator ([`synth`]),
//! training ([`trainer`]) and retrieval metrics ([`eval`]). File formats and
//! the command line live in the companion `roma` crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod array;
pub mod dap;
pub mod eval;
pub mod error;
pub mod fd;
pub mod gradcheck;
pub mod graph;
pub mod posenc;
pub mod rncl;
pub mod synth;
pub mod trainer;

pub use array::DenseArray;
pub use error::{Error, Result};
