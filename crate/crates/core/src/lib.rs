//! Single-path differentiable architecture search with disentangled topology
//! sampling and K-sample gradient accumulation.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure
//! computation driven by explicitly seeded random streams; file formats, the
//! CLI and thread pools live in the `rome-harness` crate.
//!
//! Module map:
//!
//! - [`tensor`]: dense `f64` tensors and a dynamic reverse-mode tape.
//! - [`gumbel`]: Gumbel noise, Gumbel-Max, Gumbel-Softmax, Gumbel-Top2 and
//!   temperature annealing.
//! - [`space`]: the DAG cell search space, architecture sampling, the
//!   architecture law, genotype derivation and the single-path supernet.
//! - [`bilevel`]: alternating architecture/weight updates with gradient
//!   accumulation, the search loop and from-scratch genotype training.
//! - [`stats`]: enumeration oracles and Monte Carlo verification harnesses.
//! - [`data`]: deterministic synthetic classification tasks.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod bilevel;
pub mod data;
mod error;
pub mod gumbel;
pub mod optim;
pub mod rng;
pub mod space;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
