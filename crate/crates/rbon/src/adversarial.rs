//! Worst-case reward perturbations and numerical certification of the two
//! robustness identities.
//!
//! Each regularized objective equals the value of an adversarial game: the
//! KL penalty corresponds to an opponent who may shift rewards subject to an
//! exponential-moment budget, and the transport penalty to an opponent
//! constrained to cost-Lipschitz shifts. The verifiers construct the
//! opponent's optimal perturbation explicitly, evaluate both sides, and
//! report the gap so a caller can certify the identity on real data.

use serde::Serialize;

use crate::cost::CostMatrix;
use crate::error::{Error, Result};
use crate::policies::{objective_kl, objective_wd};
use crate::pool::{CandidatePool, Policy};
use crate::transport::{check_lipschitz, wd_dual};

/// Feasibility threshold every report must satisfy regardless of the gap
/// tolerance: boundary residual for KL, Lipschitz excess for WD.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Gap tolerance for the KL identity, which is evaluated in closed form.
pub const KL_GAP_TOL: f64 = 1e-8;

/// Gap tolerance for the WD identity, which goes through a transport solve.
pub const WD_GAP_TOL: f64 = 1e-6;

/// Perturbation floor scale for candidates the policy never selects: their
/// optimal shift is -infinity, recorded as `-KL_FLOOR_SCALE * beta`.
pub const KL_FLOOR_SCALE: f64 = 1e6;

/// Which identity a report certifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Theorem {
    #[serde(rename = "KL")]
    Kl,
    #[serde(rename = "WD")]
    Wd,
}

impl std::fmt::Display for Theorem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Theorem::Kl => "KL",
            Theorem::Wd => "WD",
        })
    }
}

/// Both sides of a robustness identity at one policy, with the optimal
/// perturbation that attains the adversarial side.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualityReport {
    pub theorem: Theorem,
    /// The penalized objective evaluated directly.
    pub regularized_value: f64,
    /// The opponent's best response evaluated against the policy.
    pub adversarial_value: f64,
    /// `|regularized_value - adversarial_value|`.
    pub gap: f64,
    /// The optimal reward perturbation.
    pub perturbation: Vec<f64>,
    /// How far the perturbation strays from its feasible set.
    pub feasibility_residual: f64,
}

impl DualityReport {
    /// Whether the identity is certified at the given gap tolerance.
    pub fn passes(&self, tol: f64) -> bool {
        self.gap <= tol && self.feasibility_residual <= FEASIBILITY_TOL
    }
}

fn check_tol(tol: f64) -> Result<()> {
    if !tol.is_finite() || tol < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "tolerance must be finite and >= 0, got {tol}"
        )));
    }
    Ok(())
}

fn check_sizes(pi: &Policy, reference: &Policy) -> Result<usize> {
    if pi.len() != reference.len() {
        return Err(Error::SizeMismatch(format!(
            "policy has {} entries, reference has {}",
            pi.len(),
            reference.len()
        )));
    }
    Ok(pi.len())
}

/// The opponent's optimal reward shift under the exponential-moment budget:
/// `dR_i = beta * log(pi_i / ref_i)` wherever the policy has mass, floored
/// at `-KL_FLOOR_SCALE * beta` where it has none.
pub fn kl_worst_case(pi: &Policy, reference: &Policy, beta: f64) -> Result<Vec<f64>> {
    if !beta.is_finite() || beta <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "beta must be finite and > 0, got {beta}"
        )));
    }
    check_sizes(pi, reference)?;
    let floor = -KL_FLOOR_SCALE * beta;
    pi.probs()
        .iter()
        .zip(reference.probs())
        .enumerate()
        .map(|(index, (p, r))| {
            if *p == 0.0 {
                Ok(floor)
            } else if *r == 0.0 {
                Err(Error::ZeroReference { index })
            } else {
                Ok(beta * (p / r).ln())
            }
        })
        .collect()
}

/// How far a KL perturbation sits from the budget boundary:
/// `|sum_i ref_i exp(dR_i / beta) - sum of pi over its support|`.
fn kl_boundary_residual(perturbation: &[f64], pi: &Policy, reference: &Policy, beta: f64) -> f64 {
    let moment: f64 = reference
        .probs()
        .iter()
        .zip(perturbation)
        .map(|(r, d)| r * (d / beta).exp())
        .sum();
    let support_mass: f64 = pi.probs().iter().filter(|p| **p > 0.0).sum();
    (moment - support_mass).abs()
}

/// Certifies that the opponent's best response reproduces the KL-penalized
/// objective: `E_pi[R - dR*]` must equal `E_pi[R] - beta * KL[pi || ref]`.
/// The tolerance is validated here and applied through
/// [`DualityReport::passes`].
pub fn verify_theorem_kl(
    pi: &Policy,
    pool: &CandidatePool,
    reference: &Policy,
    reward_key: &str,
    beta: f64,
    tol: f64,
) -> Result<DualityReport> {
    check_tol(tol)?;
    let perturbation = kl_worst_case(pi, reference, beta)?;
    let rewards = pool.rewards(reward_key)?;
    if rewards.len() != pi.len() {
        return Err(Error::SizeMismatch(format!(
            "policy has {} entries, pool has {} candidates",
            pi.len(),
            rewards.len()
        )));
    }
    let adversarial_value: f64 = pi
        .probs()
        .iter()
        .zip(rewards.iter().zip(&perturbation))
        .map(|(p, (r, d))| p * (r - d))
        .sum();
    let regularized_value = objective_kl(pi, pool, reference, reward_key, beta)?;
    Ok(DualityReport {
        theorem: Theorem::Kl,
        regularized_value,
        adversarial_value,
        gap: (regularized_value - adversarial_value).abs(),
        feasibility_residual: kl_boundary_residual(&perturbation, pi, reference, beta),
        perturbation,
    })
}

/// The opponent's optimal cost-Lipschitz reward shift: a Kantorovich dual
/// potential maximizing `sum_i f_i (pi_i - ref_i)`. The output always
/// satisfies the Lipschitz bound, whatever the cost geometry.
pub fn wd_worst_case(pi: &Policy, reference: &Policy, c: &CostMatrix) -> Result<Vec<f64>> {
    check_sizes(pi, reference)?;
    let (_, potential) = wd_dual(pi, reference, c)?;
    Ok(potential.values().to_vec())
}

/// Certifies the transport identity: the opponent's value
/// `E_pi[R] - beta * max_f <f, pi - ref>` against the penalized objective
/// `E_pi[R] - beta * WD(ref, pi)`.
///
/// The two sides agree whenever the cost matrix satisfies the triangle
/// inequality (any metric cost, and any cosine cost over pairwise non-acute
/// embeddings). Costs that violate it make the Lipschitz opponent strictly
/// weaker than the transport penalty; the report then shows a genuine gap
/// and fails, which is the honest answer rather than a solver defect.
pub fn verify_theorem_wd(
    pi: &Policy,
    pool: &CandidatePool,
    reference: &Policy,
    c: &CostMatrix,
    reward_key: &str,
    beta: f64,
    tol: f64,
) -> Result<DualityReport> {
    check_tol(tol)?;
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "beta must be finite and >= 0, got {beta}"
        )));
    }
    check_sizes(pi, reference)?;
    let rewards = pool.rewards(reward_key)?;
    if rewards.len() != pi.len() {
        return Err(Error::SizeMismatch(format!(
            "policy has {} entries, pool has {} candidates",
            pi.len(),
            rewards.len()
        )));
    }
    let (dual_value, potential) = wd_dual(pi, reference, c)?;
    let expected_reward = pi.expectation(&rewards)?;
    let adversarial_value = expected_reward - beta * dual_value;
    let regularized_value = objective_wd(pi, pool, reference, c, reward_key, beta)?;
    let check = check_lipschitz(potential.values(), c, FEASIBILITY_TOL)?;
    let feasibility_residual = check.worst.map_or(0.0, |w| w.excess.max(0.0));
    Ok(DualityReport {
        theorem: Theorem::Wd,
        regularized_value,
        adversarial_value,
        gap: (regularized_value - adversarial_value).abs(),
        perturbation: potential.values().to_vec(),
        feasibility_residual,
    })
}
