//! Regularized and stochastic best-of-n selection over candidate pools.
//!
//! Given N scored, embedded candidates per prompt, this crate implements the
//! selection rules built from a reward signal and a proximity regularizer:
//! plain best-of-n, minimum-risk selection, penalized argmax rules (KL,
//! transport, and length penalties), and the two stochastic policies with
//! closed forms (a Gibbs policy for the KL penalty, a per-row assignment
//! policy for the transport penalty). Around them sits the machinery needed
//! to check them: an exact discrete transport solver with dual potentials,
//! adversarial worst-case reward perturbations with duality certificates, and
//! the evaluation protocol (win rates against best-of-n, beta sweeps, rank
//! correlations, synthetic pool generation).
//!
//! Modules:
//! - [`pool`]: domain types, JSONL ingestion, reference policies.
//! - [`cost`]: cosine-distance cost matrices.
//! - [`transport`]: exact coupling solver, dual potentials, c-transform.
//! - [`policies`]: selection rules and stochastic policies with objectives.
//! - [`adversarial`]: worst-case perturbations and duality verification.
//! - [`eval`]: win rates, beta sweeps, rank correlations, synthetic data.

pub mod adversarial;
pub mod cost;
mod error;
pub mod eval;
pub mod policies;
pub mod pool;
pub mod transport;

pub use error::{Error, Result};
