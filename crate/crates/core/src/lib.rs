//! Offline meta-reinforcement-learning core.
//!
//! Everything a desk-scale offline meta-RL experiment needs, with no I/O:
//!
//! - [`tensor`] / [`graph`]: dense f64 tensors and a reverse-mode autodiff
//!   arena whose backward pass emits graph nodes, so gradients of gradients
//!   are exact (the second-order meta-updates depend on this).
//! - [`check`]: central finite-difference oracles for gradient testing.
//! - [`params`] / [`nets`]: named parameter sets, weight-transform layers,
//!   the scalar value network, and the two-head Gaussian policy.
//! - [`losses`]: Monte-Carlo returns, value regression, advantage-weighted
//!   regression, and the enriched adaptation loss.
//! - [`opt`]: an in-repo adaptive-moment optimizer.
//! - [`envs`]: point-mass task suites, scripted behavior policies, and
//!   offline replay buffers with quality tiers.
//! - [`meta`]: bi-level meta-training, offline meta-testing, and online
//!   fine-tuning.
//! - [`baselines`]: meta behavior cloning, multi-task AWR + fine-tuning,
//!   and the two ablations (no enriched loss, no weight transform).
//! - [`universality`]: numerical verification that the plain AWR gradient
//!   collides on distinct labels while the enriched loss gradient is
//!   invertible back to the labels.
//!
//! The crate is `no_std`-compatible (requires `alloc`); all float math goes
//! through `libm` so results are bit-identical across platforms.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod baselines;
pub mod check;
pub mod envs;
pub mod fmath;
pub mod graph;
pub mod losses;
pub mod meta;
pub mod nets;
pub mod opt;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod universality;
