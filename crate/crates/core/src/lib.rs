//! Core algorithms for a hierarchical actor-critic recommender that steers
//! user preferences toward long-tail items while tracking satisfaction.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tape`]), a simulated interactive recommendation environment ([`env`],
//! [`catalog`], [`gen`]), attention-based state trackers ([`tracker`]), the
//! two agents of the hierarchy ([`agent_high`], [`agent_low`]), the training
//! loop ([`trainer`]) and evaluation metrics ([`metrics`]).
//!
//! Everything here is `no_std`-compatible (alloc required); file formats,
//! checkpoints and the command-line interface live in the companion crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod agent_high;
pub mod agent_low;
pub mod catalog;
pub mod env;
pub mod error;
pub mod gen;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod tracker;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{Optimizer, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Mix a sequence of values into one RNG seed (splitmix64 chain). Used to
/// derive independent, reproducible streams for users, episodes and phases.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        state ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}
