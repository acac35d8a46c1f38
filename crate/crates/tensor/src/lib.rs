//! Minimal dense-tensor kernel for the EDT crates.
//!
//! [`Tensor`] is a plain row-major array. [`Graph`] records operations on
//! tensors and differentiates them in reverse mode. [`OpCounter`] tallies
//! multiply-accumulates for FLOPs accounting, and [`Rng`] provides seeded,
//! resumable randomness.

mod counter;
mod error;
pub mod gradcheck;
mod graph;
mod real;
mod rng;
mod tensor;

pub use counter::OpCounter;
pub use error::{Result, TensorError};
pub use graph::{grad, permutation_index, Gradients, Graph, Var};
pub use real::Real;
pub use rng::{Rng, RngState};
pub use tensor::Tensor;
