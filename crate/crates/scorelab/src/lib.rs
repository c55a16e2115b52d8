//! Numerical laboratory for diffusion-type samplers with analytically
//! tractable targets.
//!
//! The crate implements two exact-kernel reverse samplers (an
//! Ornstein–Uhlenbeck based one and a critically damped Langevin one),
//! score oracles with calibrated L² error, denoising score matching on
//! simple hypothesis classes, Girsanov path-KL estimators, and a set of
//! divergence computations (TV, KL, W₂, relative Fisher information)
//! used to compare measured sampler error against evaluable bound
//! formulas.
//!
//! Everything is deterministic given a master seed: Monte Carlo work is
//! split into per-path streams so results are independent of worker
//! count and scheduling.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod forward;
pub mod gauss;
pub mod metrics;
pub mod plot;
pub mod quad;
pub mod samplers;
pub mod score_matching;
pub mod score_oracle;
pub mod streams;
pub mod targets;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
