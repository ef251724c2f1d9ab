//! Deterministic single-process simulator for compositional federated learning.
//!
//! The library trains two-level composition objectives
//!
//! ```text
//! F(w) = (1/n) Σ_i g^i(f^i(w)),   f^i: R^d → R^p,  g^i: R^p → R,
//! ```
//!
//! over finite heterogeneous client shards with a local-SGD server loop
//! (`runtime`), where the per-client gradient estimator chains a stochastic
//! outer gradient through a stochastic inner Jacobian and is therefore biased
//! for minibatches. Two instantiations are built in: distributionally robust
//! training, which wraps each client loss in `exp(·/γ)` so that averaging the
//! wrapped losses is equivalent to a KL-regularized worst-case reweighting
//! (`robust` verifies this equivalence numerically by two independent
//! routes), and meta-learning compositions whose inner mapping is one
//! gradient step on a per-task base loss (`tasks::maml`).
//!
//! Everything is deterministic: every random decision is drawn from a
//! counter-derived stream keyed on (seed, round, client, step, purpose), so
//! replays are bit-exact and client execution order cannot affect results.
//! The `oracles` module holds the independent verification machinery (finite
//! differences, Monte-Carlo bias probes, a reference descent loop, rate
//! fitting) that the test suite checks the runtime against.

pub mod config;
pub mod error;
pub mod oracles;
pub mod rng;
pub mod robust;
pub mod runtime;
pub mod smoothness;
pub mod tasks;
pub mod telemetry;
pub mod vec;

pub use error::{Error, Result};
pub use vec::{InnerVec, ParamVec, Vector};
