//! Core algorithms for intervention-based invariant transfer learning.
//!
//! Everything in this crate is pure computation over explicit inputs and
//! explicit RNG state. It builds with `--no-default-features` as a `no_std`
//! crate (it needs `alloc`); the `std` feature only switches on runtime CPU
//! feature detection in the matrix kernels.
//!
//! Modules, bottom-up:
//!
//! * [`otmetric`]: exact and entropic Wasserstein distances on finite
//!   supports, plus the closed-form W2 between diagonal Gaussians.
//! * [`envlab`]: finite latent MDPs, emission (rendering) functions,
//!   post-rendering augmentation and the grid reach task family.
//! * [`bisim`]: coarsest bisimulation partition, the exact bisimulation
//!   metric and the intervention validity check.
//! * [`diffcore`]: multilayer perceptrons with reverse-mode gradients and Adam.
//! * [`invariance`]: bisimulation loss, latent model losses, per-domain risks
//!   and the variance-of-risks penalty.
//! * [`agent`]: replay buffer, discrete soft actor-critic and the training loop.
//! * [`eval`]: greedy evaluation and representation diagnostics.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod agent;
pub mod bisim;
pub mod diffcore;
pub mod envlab;
pub mod error;
pub mod eval;
pub mod invariance;
pub mod otmetric;
#[cfg(feature = "oracles")]
pub mod oracles;
pub(crate) mod math;

pub use error::{Error, Result};

/// Deterministic RNG used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
