//! Multi-relation message passing (MrMP) for multi-label classification.
//!
//! This crate is `no_std` (with `alloc`) and holds every numerical piece of
//! the system: a small dense tensor type with a reverse-mode tape, the Adam
//! optimizer, pulling/pushing label graph extraction, the encoder /
//! relation-module / decoder network, training losses and the multi-label
//! evaluation metrics. File formats, checkpoints and the command line live in
//! the companion `mrmp` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod baseline;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod relgraph;
pub mod scalar;
pub mod special;
pub mod tape;
pub mod tensor;
pub mod trainer;

mod kernels;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
