//! The seven selection methods over a candidate pool.
//!
//! Deterministic selectors return the argmax of a per-candidate score:
//! the raw reward (best-of-n), negated mean transport cost (minimum-risk),
//! or the reward penalized by transport cost, reference log-probability, or
//! inverse length. The two stochastic methods return the exact maximizer of
//! the corresponding regularized objective over the whole simplex: a Gibbs
//! reweighting of the reference for the KL penalty, and a per-row assignment
//! of reference mass for the transport penalty. Ties always break toward the
//! lowest index.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{mean_cost_row, CostMatrix};
use crate::error::{Error, Result};
use crate::pool::{CandidatePool, Policy};
use crate::transport::wd_primal;

/// Selection method names as they appear on the command line and in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bon,
    Mbr,
    RbonKl,
    RbonWd,
    RbonL,
    SrbonKl,
    SrbonWd,
    Random,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Bon,
        Method::Mbr,
        Method::RbonKl,
        Method::RbonWd,
        Method::RbonL,
        Method::SrbonKl,
        Method::SrbonWd,
        Method::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bon => "bon",
            Method::Mbr => "mbr",
            Method::RbonKl => "rbon_kl",
            Method::RbonWd => "rbon_wd",
            Method::RbonL => "rbon_l",
            Method::SrbonKl => "srbon_kl",
            Method::SrbonWd => "srbon_wd",
            Method::Random => "random",
        }
    }

    /// Whether the method takes a beta parameter.
    pub fn is_regularized(self) -> bool {
        matches!(
            self,
            Method::RbonKl | Method::RbonWd | Method::RbonL | Method::SrbonKl | Method::SrbonWd
        )
    }

    /// Whether selection goes through sampling rather than an argmax.
    pub fn is_stochastic(self) -> bool {
        matches!(self, Method::SrbonKl | Method::SrbonWd | Method::Random)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method {s:?}")))
    }
}

/// A deterministic choice of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub index: usize,
    /// The method's objective value at the chosen candidate.
    pub score: f64,
    pub method: Method,
    pub beta: Option<f64>,
}

/// A distribution over candidates attaining a regularized objective.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    pub policy: Policy,
    pub method: Method,
    pub beta: f64,
    /// The attained objective value (reward minus the scaled divergence).
    pub objective_value: f64,
}

impl StochasticPolicy {
    /// Draws a candidate index; see [`sample_policy`].
    pub fn sample(&self, seed: u64) -> usize {
        sample_policy(&self.policy, seed)
    }
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

fn check_beta(beta: f64, strictly_positive: bool) -> Result<()> {
    if !beta.is_finite() || beta < 0.0 || (strictly_positive && beta == 0.0) {
        let bound = if strictly_positive { "> 0" } else { ">= 0" };
        return Err(Error::InvalidParameter(format!(
            "beta must be finite and {bound}, got {beta}"
        )));
    }
    Ok(())
}

fn check_reference(reference: &Policy, n: usize) -> Result<()> {
    if reference.len() != n {
        return Err(Error::SizeMismatch(format!(
            "reference has {} entries, pool has {n} candidates",
            reference.len()
        )));
    }
    Ok(())
}

fn check_cost(c: &CostMatrix, n: usize) -> Result<()> {
    if c.n() != n {
        return Err(Error::SizeMismatch(format!(
            "cost matrix is {0}x{0}, pool has {n} candidates",
            c.n()
        )));
    }
    Ok(())
}

/// Best-of-n: the candidate with the highest reward.
pub fn select_bon(pool: &CandidatePool, reward_key: &str) -> Result<Selection> {
    let rewards = pool.rewards(reward_key)?;
    let index = argmax(&rewards);
    Ok(Selection {
        index,
        score: rewards[index],
        method: Method::Bon,
        beta: None,
    })
}

/// Minimum-risk selection: the candidate with the highest mean cosine
/// similarity `(1/N) * sum_j (1 - C_ij)` to the pool, equivalently the
/// lowest mean cost row.
pub fn select_mbr(pool: &CandidatePool, c: &CostMatrix) -> Result<Selection> {
    check_cost(c, pool.n())?;
    let scores: Vec<f64> = (0..pool.n())
        .map(|i| Ok(1.0 - mean_cost_row(c, i)?))
        .collect::<Result<_>>()?;
    let index = argmax(&scores);
    Ok(Selection {
        index,
        score: scores[index],
        method: Method::Mbr,
        beta: None,
    })
}

/// Transport-penalized selection: argmax of `R_i - beta * mean_cost_row(C, i)`.
pub fn select_rbon_wd(
    pool: &CandidatePool,
    c: &CostMatrix,
    reward_key: &str,
    beta: f64,
) -> Result<Selection> {
    check_beta(beta, false)?;
    check_cost(c, pool.n())?;
    let rewards = pool.rewards(reward_key)?;
    let scores: Vec<f64> = (0..pool.n())
        .map(|i| Ok(rewards[i] - beta * mean_cost_row(c, i)?))
        .collect::<Result<_>>()?;
    let index = argmax(&scores);
    Ok(Selection {
        index,
        score: scores[index],
        method: Method::RbonWd,
        beta: Some(beta),
    })
}

/// Reference-penalized selection: argmax of `R_i + beta * log ref_i` (the KL
/// divergence of a point mass from the reference is `-log ref_i`).
pub fn select_rbon_kl(
    pool: &CandidatePool,
    reference: &Policy,
    reward_key: &str,
    beta: f64,
) -> Result<Selection> {
    check_beta(beta, false)?;
    check_reference(reference, pool.n())?;
    let rewards = pool.rewards(reward_key)?;
    let scores: Vec<f64> = if beta == 0.0 {
        rewards
    } else {
        if let Some(index) = reference.probs().iter().position(|p| *p == 0.0) {
            return Err(Error::ZeroReference { index });
        }
        rewards
            .iter()
            .zip(reference.probs())
            .map(|(r, p)| r + beta * p.ln())
            .collect()
    };
    let index = argmax(&scores);
    Ok(Selection {
        index,
        score: scores[index],
        method: Method::RbonKl,
        beta: Some(beta),
    })
}

/// Length-penalized selection: argmax of `R_i - beta / token_len_i`.
pub fn select_rbon_l(pool: &CandidatePool, reward_key: &str, beta: f64) -> Result<Selection> {
    check_beta(beta, false)?;
    let rewards = pool.rewards(reward_key)?;
    let lens = pool.token_lens();
    let scores: Vec<f64> = rewards
        .iter()
        .zip(&lens)
        .map(|(r, len)| r - beta / len)
        .collect();
    let index = argmax(&scores);
    Ok(Selection {
        index,
        score: scores[index],
        method: Method::RbonL,
        beta: Some(beta),
    })
}

/// The exact maximizer of `E_pi[R] - beta * KL[pi || ref]` over the simplex:
/// the Gibbs policy `pi_i ∝ ref_i * exp(R_i / beta)`, computed with
/// max-shifted exponentials. The attained objective is
/// `beta * log sum_i ref_i exp(R_i / beta)`.
pub fn srbon_kl_policy(
    pool: &CandidatePool,
    reference: &Policy,
    reward_key: &str,
    beta: f64,
) -> Result<StochasticPolicy> {
    check_beta(beta, true)?;
    check_reference(reference, pool.n())?;
    if let Some(index) = reference.probs().iter().position(|p| *p == 0.0) {
        return Err(Error::ZeroReference { index });
    }
    let rewards = pool.rewards(reward_key)?;
    let scaled: Vec<f64> = rewards.iter().map(|r| r / beta).collect();
    let shift = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = reference
        .probs()
        .iter()
        .zip(&scaled)
        .map(|(p, t)| p * (t - shift).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let policy = Policy::new(weights.into_iter().map(|w| w / total).collect())?;
    let objective_value = beta * (shift + total.ln());
    Ok(StochasticPolicy {
        policy,
        method: Method::SrbonKl,
        beta,
        objective_value,
    })
}

/// The exact maximizer of `E_pi[R] - beta * WD(ref, pi)` over the simplex.
///
/// Fixing the coupling's row marginals to `ref` turns the objective into a
/// separable maximization: each source index i routes its whole mass to
/// `j*(i) = argmax_j (R_j - beta * C_ij)` (ties to the lowest j), and the
/// policy collects `pi_j = sum of ref_i over rows choosing j`. The induced
/// coupling is itself an optimal transport plan from `ref` to the result, so
/// the attained objective `sum_i ref_i max_j (R_j - beta * C_ij)` equals
/// `E_pi[R] - beta * wd_primal(ref, pi, C)` exactly.
pub fn srbon_wd_policy(
    pool: &CandidatePool,
    reference: &Policy,
    c: &CostMatrix,
    reward_key: &str,
    beta: f64,
) -> Result<StochasticPolicy> {
    check_beta(beta, false)?;
    check_reference(reference, pool.n())?;
    check_cost(c, pool.n())?;
    let rewards = pool.rewards(reward_key)?;
    let n = pool.n();
    let mut probs = vec![0.0; n];
    let mut objective_value = 0.0;
    for i in 0..n {
        let mut best = 0;
        let mut best_score = rewards[0] - beta * c.at(i, 0);
        for (j, reward) in rewards.iter().enumerate().skip(1) {
            let score = reward - beta * c.at(i, j);
            if score > best_score {
                best = j;
                best_score = score;
            }
        }
        probs[best] += reference.probs()[i];
        objective_value += reference.probs()[i] * best_score;
    }
    Ok(StochasticPolicy {
        policy: Policy::new(probs)?,
        method: Method::SrbonWd,
        beta,
        objective_value,
    })
}

/// Draws an index from a policy by inverse CDF.
///
/// The generator and the mapping are pinned so any implementation can
/// reproduce draws: ChaCha8 seeded with the 64-bit seed, one `next_u64`
/// call, top 53 bits scaled into [0, 1), then the first index whose
/// cumulative probability exceeds the draw.
pub fn sample_policy(policy: &Policy, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let mut acc = 0.0;
    for (i, p) in policy.probs().iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    policy.len() - 1
}

/// `E_pi[R] - beta * KL[pi || ref]`, with `0 * log 0 = 0`.
pub fn objective_kl(
    pi: &Policy,
    pool: &CandidatePool,
    reference: &Policy,
    reward_key: &str,
    beta: f64,
) -> Result<f64> {
    check_beta(beta, false)?;
    check_reference(reference, pool.n())?;
    check_reference(pi, pool.n())?;
    let rewards = pool.rewards(reward_key)?;
    let mut kl = 0.0;
    for (index, (p, r)) in pi.probs().iter().zip(reference.probs()).enumerate() {
        if *p > 0.0 {
            if *r == 0.0 {
                return Err(Error::ZeroReference { index });
            }
            kl += p * (p / r).ln();
        }
    }
    Ok(pi.expectation(&rewards)? - beta * kl)
}

/// `E_pi[R] - beta * wd_primal(ref, pi, C)`.
pub fn objective_wd(
    pi: &Policy,
    pool: &CandidatePool,
    reference: &Policy,
    c: &CostMatrix,
    reward_key: &str,
    beta: f64,
) -> Result<f64> {
    check_beta(beta, false)?;
    check_reference(reference, pool.n())?;
    check_reference(pi, pool.n())?;
    check_cost(c, pool.n())?;
    let rewards = pool.rewards(reward_key)?;
    let (wd, _) = wd_primal(reference, pi, c)?;
    Ok(pi.expectation(&rewards)? - beta * wd)
}

/// The inverse-length distribution `mu'_i = (1 / len_i) / Z`.
pub fn length_distribution(pool: &CandidatePool) -> Policy {
    let weights: Vec<f64> = pool.token_lens().iter().map(|len| 1.0 / len).collect();
    let total: f64 = weights.iter().sum();
    Policy::new(weights.into_iter().map(|w| w / total).collect())
        .expect("inverse lengths normalize to a distribution")
}

/// Total variation distance between the point mass at `i` and `mu_prime`:
/// `1 - mu_prime_i`.
pub fn tv_pointmass(mu_prime: &Policy, i: usize) -> Result<f64> {
    if i >= mu_prime.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            n: mu_prime.len(),
        });
    }
    Ok(1.0 - mu_prime.probs()[i])
}
