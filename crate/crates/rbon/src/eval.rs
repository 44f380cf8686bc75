//! Evaluation protocol: win rates against the best-of-n baseline, beta
//! sweeps with train-split selection of the best setting, rank correlations
//! between reward models, log-probability diagnostics, and seeded synthetic
//! pool generators for tests and the command-line verifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{cost_matrix, CostMatrix};
use crate::error::{Error, Result};
use crate::policies::{
    select_bon, select_rbon_kl, select_rbon_l, select_rbon_wd, srbon_kl_policy, srbon_wd_policy,
    Method,
};
use crate::pool::{empirical_reference, model_reference, Candidate, CandidatePool, Dataset, Policy};

/// How the reference policy is built for KL- and transport-penalized
/// methods: uniform over the pool, or a softmax of reference log
/// probabilities at a temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RefMode {
    Empirical,
    Logprob { temperature: f64 },
}

impl RefMode {
    pub fn policy(self, pool: &CandidatePool) -> Result<Policy> {
        match self {
            RefMode::Empirical => Ok(empirical_reference(pool)),
            RefMode::Logprob { temperature } => model_reference(pool, temperature),
        }
    }
}

/// One grid point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub win_rate_percent: f64,
}

/// A beta sweep over one split: the win-rate curve and the best setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub method: Method,
    pub proxy_key: String,
    pub gold_key: String,
    pub split_label: String,
    pub rows: Vec<SweepRow>,
    /// The grid value with the highest win rate, ties to the smallest beta.
    pub beta_star: f64,
}

/// Percentage of pools where the selection beats the baseline under the
/// gold reward, ties counted as half a win. Comparisons are exact floating
/// comparisons, so identical picks tie and self-comparison is 50.0 exactly.
pub fn win_rate(
    selections: &[usize],
    baseline: &[usize],
    dataset: &Dataset,
    gold_key: &str,
) -> Result<f64> {
    let pools = dataset.pools();
    if pools.is_empty() {
        return Err(Error::InvalidParameter(
            "win rate needs at least one pool".to_string(),
        ));
    }
    if selections.len() != pools.len() || baseline.len() != pools.len() {
        return Err(Error::SizeMismatch(format!(
            "{} selections and {} baseline picks for {} pools",
            selections.len(),
            baseline.len(),
            pools.len()
        )));
    }
    let mut score = 0.0;
    for (pool, (s, b)) in pools.iter().zip(selections.iter().zip(baseline)) {
        let gold = pool.rewards(gold_key)?;
        for index in [*s, *b] {
            if index >= gold.len() {
                return Err(Error::IndexOutOfRange {
                    index,
                    n: gold.len(),
                });
            }
        }
        if gold[*s] > gold[*b] {
            score += 1.0;
        } else if gold[*s] == gold[*b] {
            score += 0.5;
        }
    }
    Ok(100.0 * score / pools.len() as f64)
}

/// The standard sweep grid: a 1-2-5 ladder from 1e-4 through 2e1, 18 values.
pub fn beta_grid() -> Vec<f64> {
    vec![
        1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1, 2e-1, 5e-1, 1e0, 2e0, 5e0,
        1e1, 1.5e1, 2e1,
    ]
}

/// Per-pool sampling seed, derived by FNV-1a over the global seed's little
/// endian bytes followed by the prompt id's UTF-8 bytes. Hashing the prompt
/// id makes stochastic sweeps independent of pool evaluation order.
pub fn pool_seed(global_seed: u64, prompt_id: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in global_seed.to_le_bytes().into_iter().chain(prompt_id.bytes()) {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Runs a penalized method over the whole grid and scores each beta by win
/// rate against best-of-n on the proxy reward, judged by the gold reward.
/// Stochastic methods draw one candidate per pool with [`pool_seed`].
pub fn beta_sweep(
    dataset: &Dataset,
    method: Method,
    proxy_key: &str,
    gold_key: &str,
    grid: &[f64],
    reference: RefMode,
    seed: u64,
) -> Result<SweepReport> {
    if !method.is_regularized() {
        return Err(Error::InvalidParameter(format!(
            "method {method} does not take a beta sweep"
        )));
    }
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty beta grid".to_string()));
    }
    let pools = dataset.pools();
    if pools.is_empty() {
        return Err(Error::InvalidParameter(
            "sweep needs at least one pool".to_string(),
        ));
    }

    let baseline: Vec<usize> = pools
        .iter()
        .map(|pool| Ok(select_bon(pool, proxy_key)?.index))
        .collect::<Result<_>>()?;
    let needs_cost = matches!(method, Method::RbonWd | Method::SrbonWd);
    let needs_reference = matches!(method, Method::RbonKl | Method::SrbonKl | Method::SrbonWd);
    let costs: Vec<Option<CostMatrix>> = pools
        .iter()
        .map(|pool| needs_cost.then(|| cost_matrix(pool)))
        .collect();
    let references: Vec<Option<Policy>> = pools
        .iter()
        .map(|pool| {
            if needs_reference {
                reference.policy(pool).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = pools
        .iter()
        .map(|pool| pool_seed(seed, pool.prompt_id()))
        .collect();

    let mut rows = Vec::with_capacity(grid.len());
    for &beta in grid {
        let selections: Vec<usize> = pools
            .iter()
            .enumerate()
            .map(|(k, pool)| {
                let reference = references[k].as_ref();
                let cost = costs[k].as_ref();
                let index = match method {
                    Method::RbonKl => {
                        select_rbon_kl(pool, reference.unwrap(), proxy_key, beta)?.index
                    }
                    Method::RbonWd => select_rbon_wd(pool, cost.unwrap(), proxy_key, beta)?.index,
                    Method::RbonL => select_rbon_l(pool, proxy_key, beta)?.index,
                    Method::SrbonKl => {
                        srbon_kl_policy(pool, reference.unwrap(), proxy_key, beta)?.sample(seeds[k])
                    }
                    Method::SrbonWd => {
                        srbon_wd_policy(pool, reference.unwrap(), cost.unwrap(), proxy_key, beta)?
                            .sample(seeds[k])
                    }
                    _ => unreachable!("checked above"),
                };
                Ok(index)
            })
            .collect::<Result<_>>()?;
        rows.push(SweepRow {
            beta,
            win_rate_percent: win_rate(&selections, &baseline, dataset, gold_key)?,
        });
    }

    let mut beta_star = rows[0].beta;
    let mut best = rows[0].win_rate_percent;
    for row in &rows[1..] {
        if row.win_rate_percent > best || (row.win_rate_percent == best && row.beta < beta_star) {
            best = row.win_rate_percent;
            beta_star = row.beta;
        }
    }
    Ok(SweepReport {
        method,
        proxy_key: proxy_key.to_string(),
        gold_key: gold_key.to_string(),
        split_label: dataset.split_label().to_string(),
        rows,
        beta_star,
    })
}

fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let mid_rank = (start + end) as f64 / 2.0 + 1.0;
        for &slot in &order[start..=end] {
            ranks[slot] = mid_rank;
        }
        start = end + 1;
    }
    ranks
}

/// Rank correlation with fractional mid-ranks for ties: the Pearson
/// correlation of the two rank vectors.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::SizeMismatch(format!(
            "rank correlation of {} against {} points",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InvalidParameter(
            "rank correlation needs at least two points".to_string(),
        ));
    }
    let rx = fractional_ranks(xs);
    let ry = fractional_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in rx.iter().zip(&ry) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance(
            "rank correlation of a constant sequence".to_string(),
        ));
    }
    // (sxx * syy).sqrt() keeps identical rank vectors at exactly 1.0.
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Average within-pool rank correlation for every pair of reward keys.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    keys: Vec<String>,
    values: Vec<Vec<f64>>,
}

impl CorrelationMatrix {
    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }
}

/// Within-pool rank correlations between each pair of reward keys, averaged
/// over pools. The diagonal is exactly 1.0.
pub fn reward_correlation_matrix(dataset: &Dataset, keys: &[&str]) -> Result<CorrelationMatrix> {
    if keys.len() < 2 {
        return Err(Error::InvalidParameter(
            "correlation matrix needs at least two reward keys".to_string(),
        ));
    }
    let pools = dataset.pools();
    if pools.is_empty() {
        return Err(Error::InvalidParameter(
            "correlation matrix needs at least one pool".to_string(),
        ));
    }
    let k = keys.len();
    let mut values = vec![vec![0.0; k]; k];
    for (i, row) in values.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for a in 0..k {
        for b in a + 1..k {
            let mut total = 0.0;
            for pool in pools {
                let xs = pool.rewards(keys[a])?;
                let ys = pool.rewards(keys[b])?;
                total += spearman(&xs, &ys)?;
            }
            let rho = total / pools.len() as f64;
            values[a][b] = rho;
            values[b][a] = rho;
        }
    }
    Ok(CorrelationMatrix {
        keys: keys.iter().map(|key| key.to_string()).collect(),
        values,
    })
}

/// Rank correlations of the reference log probability against the gold
/// reward and against token length: `(rho_reward_logprob,
/// rho_length_logprob)`. Pooled across all candidates by default; with
/// `per_pool` set, within-pool correlations averaged over pools instead.
pub fn logprob_diagnostics(
    dataset: &Dataset,
    gold_key: &str,
    per_pool: bool,
) -> Result<(f64, f64)> {
    let pools = dataset.pools();
    if pools.is_empty() {
        return Err(Error::InvalidParameter(
            "diagnostics need at least one pool".to_string(),
        ));
    }
    if per_pool {
        let (mut reward_total, mut length_total) = (0.0, 0.0);
        for pool in pools {
            let logprobs = pool.logprobs()?;
            reward_total += spearman(&pool.rewards(gold_key)?, &logprobs)?;
            length_total += spearman(&pool.token_lens(), &logprobs)?;
        }
        let n = pools.len() as f64;
        return Ok((reward_total / n, length_total / n));
    }
    let mut gold = Vec::new();
    let mut lens = Vec::new();
    let mut logprobs = Vec::new();
    for pool in pools {
        gold.extend(pool.rewards(gold_key)?);
        lens.extend(pool.token_lens());
        logprobs.extend(pool.logprobs()?);
    }
    Ok((
        spearman(&gold, &logprobs)?,
        spearman(&lens, &logprobs)?,
    ))
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn check_generator_sizes(n_pools: usize, n_candidates: usize) -> Result<()> {
    if n_pools == 0 || n_candidates == 0 {
        return Err(Error::InvalidParameter(format!(
            "generator needs at least one pool and one candidate, got {n_pools} and {n_candidates}"
        )));
    }
    Ok(())
}

/// Seeded synthetic pools with `proxy` and `gold` reward keys.
///
/// Embeddings cluster around a per-pool center; the gold reward is a smooth
/// function of the embedding plus a mild length term; the proxy adds
/// Gaussian noise of scale `proxy_noise` (zero noise copies gold exactly);
/// the reference log probability is `-length_bias * token_len` plus small
/// noise, clamped to stay nonpositive.
pub fn synth_pools(
    n_pools: usize,
    n_candidates: usize,
    embed_dim: usize,
    proxy_noise: f64,
    length_bias: f64,
    seed: u64,
) -> Result<Dataset> {
    check_generator_sizes(n_pools, n_candidates)?;
    if embed_dim < 2 {
        return Err(Error::InvalidParameter(format!(
            "embedding dimension must be at least 2, got {embed_dim}"
        )));
    }
    if !proxy_noise.is_finite() || proxy_noise < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "proxy noise must be finite and >= 0, got {proxy_noise}"
        )));
    }
    if !length_bias.is_finite() || length_bias < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "length bias must be finite and >= 0, got {length_bias}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = Vec::with_capacity(n_pools);
    for p in 0..n_pools {
        let center: Vec<f64> = (0..embed_dim).map(|_| gaussian(&mut rng)).collect();
        let mut candidates = Vec::with_capacity(n_candidates);
        for _ in 0..n_candidates {
            let mut embedding: Vec<f64> = center
                .iter()
                .map(|c| c + 0.35 * gaussian(&mut rng))
                .collect();
            if embedding.iter().all(|x| *x == 0.0) {
                embedding[0] = 1.0;
            }
            let token_len = rng.gen_range(1..=120u32);
            let smooth: f64 =
                embedding.iter().map(|x| x.sin()).sum::<f64>() / embed_dim as f64;
            let gold = smooth + 0.1 * (token_len as f64 / 60.0).tanh();
            let proxy = if proxy_noise == 0.0 {
                gold
            } else {
                gold + proxy_noise * gaussian(&mut rng)
            };
            let logprob =
                (-length_bias * token_len as f64 + 0.1 * gaussian(&mut rng)).min(0.0);
            candidates.push(Candidate {
                text: None,
                token_len,
                logprob_ref: Some(logprob),
                rewards: [
                    ("gold".to_string(), gold),
                    ("proxy".to_string(), proxy),
                ]
                .into_iter()
                .collect(),
                embedding,
            });
        }
        pools.push(CandidatePool::new(format!("synth-{p:04}"), candidates)?);
    }
    Dataset::new(pools, "synth")
}

/// Seeded pools whose embeddings are a perturbed centered simplex frame, so
/// every pairwise angle is obtuse and every cosine cost lies in [1, 2].
/// Costs in that range satisfy the triangle inequality outright, which makes
/// these pools the reference geometry for transport-identity certification.
pub fn synth_obtuse_pools(n_pools: usize, n_candidates: usize, seed: u64) -> Result<Dataset> {
    check_generator_sizes(n_pools, n_candidates)?;
    let n = n_candidates;
    let dim = n.max(2);
    let sigma = if n > 1 { 0.1 / (n - 1) as f64 } else { 0.1 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = Vec::with_capacity(n_pools);
    for p in 0..n_pools {
        let embeddings = loop {
            let draw: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    (0..dim)
                        .map(|d| {
                            let frame = if n > 1 {
                                (if d == i { 1.0 } else { 0.0 }) - 1.0 / n as f64
                            } else if d == 0 {
                                1.0
                            } else {
                                0.0
                            };
                            frame + sigma * gaussian(&mut rng)
                        })
                        .collect()
                })
                .collect();
            let obtuse = (0..n).all(|i| {
                (i + 1..n).all(|j| {
                    draw[i]
                        .iter()
                        .zip(&draw[j])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        < 0.0
                })
            });
            if obtuse {
                break draw;
            }
        };
        let candidates = embeddings
            .into_iter()
            .map(|embedding| {
                let token_len = rng.gen_range(1..=60u32);
                let gold = gaussian(&mut rng);
                let proxy = gold + 0.1 * gaussian(&mut rng);
                let logprob = (-0.02 * token_len as f64 + 0.05 * gaussian(&mut rng)).min(0.0);
                Candidate {
                    text: None,
                    token_len,
                    logprob_ref: Some(logprob),
                    rewards: [
                        ("gold".to_string(), gold),
                        ("proxy".to_string(), proxy),
                    ]
                    .into_iter()
                    .collect(),
                    embedding,
                }
            })
            .collect();
        pools.push(CandidatePool::new(format!("obtuse-{p:04}"), candidates)?);
    }
    Dataset::new(pools, "synth")
}
