//! Connectionist probabilistic programs with sequential observations.

pub mod datasets;
pub mod error;
pub mod harness;
pub mod inference;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod semantics;
pub mod tree;

pub use error::{Error, Result};
