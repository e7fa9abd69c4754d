//! Gated structured memory for recurrent sequence models.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: double-precision tensors and a reverse-mode autodiff tape.
//! - [`memory`]: slot memory with gated writes, attention reads, forgetting
//!   updates and read/state fusion.
//! - [`model`]: a gated recurrent controller that threads a memory through a
//!   token sequence, in four memory variants.
//! - [`train`]: the joint objective (task loss plus write and forget
//!   penalties), optimizers and the training loop.
//! - [`tasks`] and [`metrics`]: seeded synthetic long-dependency tasks and
//!   answer-quality metrics.
//! - [`harness`]: experiment configuration, runs, sweeps and file outputs.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
