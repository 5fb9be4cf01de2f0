//! Neural proximal policy optimization on finite MDPs.
//!
//! The crate pairs a from-scratch implementation of KL-penalized PPO, whose
//! actor and critic are overparametrized two-layer ReLU networks trained by
//! projected SGD / TD with iterate averaging, with exact finite-MDP oracles
//! and a harness that checks the convergence theory numerically.
//!
//! Module map:
//!
//! - [`mdp`]: finite MDPs, stationary distributions, exact `Q`/`V`, sampling.
//! - [`net`]: the width-`m` two-layer ReLU network, projection and local
//!   linearization at initialization.
//! - [`energy`]: energy-based softmax policies, KL and the closed-form
//!   KL-regularized improvement step.
//! - [`oracle`]: optimal policy, density-ratio coefficients, ideal updates.
//! - [`learner`]: the projected stochastic (semi)gradient meta-algorithm and
//!   its SGD (actor) and TD (critic) instantiations.
//! - [`ppo`]: the outer neural PPO loop and its per-iteration records.
//! - [`harness`]: identity/inequality checks, rate fits and sweeps.
//! - [`cli`]: the command implementations behind the `neural-ppo` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod energy;
pub mod harness;
pub mod learner;
pub mod mdp;
pub mod net;
pub mod oracle;
pub mod ppo;
pub mod table;

pub use energy::{EnergyFn, EnergyPolicy};
pub use mdp::{FiniteMdp, PolicyTable, StateActionDistribution, StateDistribution};
pub use net::{NetInit, TwoLayerNet};
pub use oracle::OracleSolution;
pub use ppo::{IterationRecord, RunConfig};
pub use table::SaTable;

/// Deterministic RNG used everywhere a seed is accepted.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds the RNG for `seed` on an independent `stream`.
///
/// Streams let one user-facing seed drive several uncorrelated consumers
/// (network initialization, tuple sampling, probes) reproducibly.
pub fn seeded_rng(seed: u64, stream: u64) -> SeededRng {
    use rand::SeedableRng;
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
