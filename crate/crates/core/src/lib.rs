//! Weakly-supervised temporal action localization that joins the common and definite
//! phases of conjoint actions.
//!
//! The crate is organised bottom-up: [`tensor`] and [`graph`] form a small reverse-mode
//! autodiff engine, [`model`] and [`losses`] define the network and its objectives,
//! [`inference`] and [`eval`] turn outputs into scored proposals and mAP, and [`data`]
//! and [`train`] handle feature files, synthetic data and the training loop.

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod inference;
mod kernels;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tensor::{Scalar, Tensor, TensorError};

/// The generator behind every random draw: xoshiro256** seeded through SplitMix64.
pub type SeededRng = rand_xoshiro::Xoshiro256StarStar;

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Seed of an independent stream `stream` derived from `seed`.
pub fn derived_seed(seed: u64, stream: u64) -> u64 {
    use rand::Rng;
    seeded_rng(seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)).random()
}
