//! Entropy-minimization test-time adaptation on a small batch-normalized MLP,
//! the mini-batch k-means view of it, and a synthetic corruption benchmark.

pub mod adaptation;
pub mod benchmark;
pub mod checkpoint;
pub mod clustering;
pub mod error;
pub mod network;
pub mod numeric;
pub mod optim;

pub use error::{Error, Result};
pub use network::{BnMode, Network};
pub use numeric::{LogitVector, Matrix, ProbVector};
