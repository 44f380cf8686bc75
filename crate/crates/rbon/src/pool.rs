//! Domain types for candidate pools, ingestion from line-delimited JSON, and
//! reference-policy construction.
//!
//! A pool holds the N candidates sampled for one prompt, each carrying the
//! scores a selection method may consult: per-model rewards, a reference
//! log-probability, a token length, and an embedding. Embeddings are stored
//! exactly as ingested; they are L2-normalized later, at cost computation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for a probability vector summing to 1.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// One sampled response for a prompt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub token_len: u32,
    /// Reference log-probability of the candidate, when the producer supplied one.
    #[serde(rename = "logprob", skip_serializing_if = "Option::is_none")]
    pub logprob_ref: Option<f64>,
    /// Reward-model name to score.
    pub rewards: BTreeMap<String, f64>,
    pub embedding: Vec<f64>,
}

/// All candidates sampled for one prompt, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    prompt_id: String,
    candidates: Vec<Candidate>,
}

impl CandidatePool {
    /// Validates candidate invariants: at least one candidate, a shared
    /// embedding dimension with nonzero norms, positive token lengths,
    /// non-positive log-probabilities, finite scores.
    pub fn new(prompt_id: impl Into<String>, candidates: Vec<Candidate>) -> Result<Self> {
        let prompt_id = prompt_id.into();
        let invalid = |message: String| Error::InvalidPool {
            prompt_id: prompt_id.clone(),
            message,
        };
        if candidates.is_empty() {
            return Err(invalid("pool has no candidates".to_string()));
        }
        let dim = candidates[0].embedding.len();
        if dim == 0 {
            return Err(invalid("candidate 0: empty embedding".to_string()));
        }
        for (index, cand) in candidates.iter().enumerate() {
            if cand.token_len < 1 {
                return Err(invalid(format!("candidate {index}: token_len must be >= 1")));
            }
            if let Some(lp) = cand.logprob_ref {
                if !lp.is_finite() || lp > 0.0 {
                    return Err(invalid(format!(
                        "candidate {index}: logprob must be finite and <= 0, got {lp}"
                    )));
                }
            }
            if cand.embedding.len() != dim {
                return Err(invalid(format!(
                    "candidate {index}: embedding dimension {} differs from pool dimension {dim}",
                    cand.embedding.len()
                )));
            }
            if cand.embedding.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("candidate {index}: non-finite embedding entry")));
            }
            if cand.embedding.iter().all(|x| *x == 0.0) {
                return Err(invalid(format!("candidate {index}: zero-norm embedding")));
            }
            for (key, value) in &cand.rewards {
                if !value.is_finite() {
                    return Err(invalid(format!(
                        "candidate {index}: non-finite reward for key {key:?}"
                    )));
                }
            }
        }
        Ok(Self {
            prompt_id,
            candidates,
        })
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    /// Number of candidates N.
    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    /// Shared embedding dimension D.
    pub fn dim(&self) -> usize {
        self.candidates[0].embedding.len()
    }

    /// The reward vector for one reward key, in candidate order.
    pub fn rewards(&self, key: &str) -> Result<Vec<f64>> {
        self.candidates
            .iter()
            .enumerate()
            .map(|(index, cand)| {
                cand.rewards
                    .get(key)
                    .copied()
                    .ok_or_else(|| Error::MissingRewardKey {
                        prompt_id: self.prompt_id.clone(),
                        index,
                        key: key.to_string(),
                    })
            })
            .collect()
    }

    /// Token lengths as floats, in candidate order.
    pub fn token_lens(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| f64::from(c.token_len)).collect()
    }

    /// Reference log-probabilities, erroring on the first candidate without one.
    pub fn logprobs(&self) -> Result<Vec<f64>> {
        self.candidates
            .iter()
            .enumerate()
            .map(|(index, cand)| {
                cand.logprob_ref.ok_or_else(|| Error::MissingLogprob {
                    prompt_id: self.prompt_id.clone(),
                    index,
                })
            })
            .collect()
    }
}

/// A probability distribution over one pool's candidate indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Policy {
    probs: Vec<f64>,
}

impl Policy {
    /// Validates the simplex invariants: nonnegative entries summing to 1
    /// within [`SIMPLEX_TOL`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidPolicy("empty probability vector".to_string()));
        }
        for (i, p) in probs.iter().enumerate() {
            if !p.is_finite() || *p < 0.0 {
                return Err(Error::InvalidPolicy(format!(
                    "entry {i} is {p}, must be finite and >= 0"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidPolicy(format!(
                "entries sum to {sum}, not 1 within {SIMPLEX_TOL:e}"
            )));
        }
        Ok(Self { probs })
    }

    /// The uniform distribution over n indices.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidPolicy("empty probability vector".to_string()));
        }
        Ok(Self {
            probs: vec![1.0 / n as f64; n],
        })
    }

    /// The point mass at `index`.
    pub fn point_mass(index: usize, n: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::IndexOutOfRange { index, n });
        }
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// E_π[values], requiring matching lengths.
    pub fn expectation(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.probs.len() {
            return Err(Error::SizeMismatch(format!(
                "policy has {} entries, values has {}",
                self.probs.len(),
                values.len()
            )));
        }
        Ok(self.probs.iter().zip(values).map(|(p, v)| p * v).sum())
    }
}

impl TryFrom<Vec<f64>> for Policy {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Policy::new(probs)
    }
}

impl From<Policy> for Vec<f64> {
    fn from(policy: Policy) -> Vec<f64> {
        policy.probs
    }
}

/// A named split of candidate pools with unique prompt ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pools: Vec<CandidatePool>,
    split_label: String,
    /// Count of unknown fields skipped during ingestion.
    warnings: usize,
}

impl Dataset {
    pub fn new(pools: Vec<CandidatePool>, split_label: impl Into<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for pool in &pools {
            if !seen.insert(pool.prompt_id().to_string()) {
                return Err(Error::DuplicatePromptId(pool.prompt_id().to_string()));
            }
        }
        Ok(Self {
            pools,
            split_label: split_label.into(),
            warnings: 0,
        })
    }

    pub fn pools(&self) -> &[CandidatePool] {
        &self.pools
    }

    pub fn split_label(&self) -> &str {
        &self.split_label
    }

    /// Unknown wire fields skipped while loading this dataset.
    pub fn warnings(&self) -> usize {
        self.warnings
    }

    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }
}

#[derive(Deserialize)]
struct CandidateWire {
    #[serde(default)]
    text: Option<String>,
    token_len: u32,
    #[serde(default)]
    logprob: Option<f64>,
    #[serde(default)]
    rewards: BTreeMap<String, f64>,
    embedding: Vec<f64>,
    #[serde(flatten)]
    unknown: BTreeMap<String, serde_json::Value>,
}

#[derive(Deserialize)]
struct PoolWire {
    prompt_id: String,
    candidates: Vec<CandidateWire>,
    #[serde(flatten)]
    unknown: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize)]
struct PoolOut<'a> {
    prompt_id: &'a str,
    candidates: &'a [Candidate],
}

/// Loads a dataset from a line-delimited JSON file (one pool per line).
///
/// Every candidate must carry all of `reward_keys`. Blank lines are skipped;
/// unknown fields are ignored and counted in [`Dataset::warnings`]. Errors
/// report the 1-based line number of the offending record.
pub fn load_pools(
    path: impl AsRef<Path>,
    reward_keys: &[&str],
    split_label: &str,
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut pools = Vec::new();
    let mut seen = BTreeSet::new();
    let mut warnings = 0usize;
    for (offset, line) in reader.lines().enumerate() {
        let line_no = offset + 1;
        let line = line.map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: PoolWire = serde_json::from_str(&line).map_err(|e| Error::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        let at_line = |source: Error| Error::Record {
            line: line_no,
            source: Box::new(source),
        };

        warnings += wire.unknown.len();
        let mut candidates = Vec::with_capacity(wire.candidates.len());
        for cand in wire.candidates {
            warnings += cand.unknown.len();
            candidates.push(Candidate {
                text: cand.text,
                token_len: cand.token_len,
                logprob_ref: cand.logprob,
                rewards: cand.rewards,
                embedding: cand.embedding,
            });
        }
        let pool = CandidatePool::new(wire.prompt_id, candidates).map_err(at_line)?;
        for (index, _) in pool.candidates().iter().enumerate() {
            for key in reward_keys {
                if !pool.candidates()[index].rewards.contains_key(*key) {
                    return Err(at_line(Error::MissingRewardKey {
                        prompt_id: pool.prompt_id().to_string(),
                        index,
                        key: (*key).to_string(),
                    }));
                }
            }
        }
        if !seen.insert(pool.prompt_id().to_string()) {
            return Err(at_line(Error::DuplicatePromptId(pool.prompt_id().to_string())));
        }
        pools.push(pool);
    }

    let mut dataset = Dataset::new(pools, split_label)?;
    dataset.warnings = warnings;
    Ok(dataset)
}

/// Writes a dataset in the pool file format accepted by [`load_pools`].
pub fn write_pools(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for pool in dataset.pools() {
        let record = PoolOut {
            prompt_id: pool.prompt_id(),
            candidates: pool.candidates(),
        };
        serde_json::to_writer(&mut out, &record).map_err(|e| Error::Numeric(e.to_string()))?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(&out).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// The empirical reference over a pool: exactly 1/N per candidate.
pub fn empirical_reference(pool: &CandidatePool) -> Policy {
    Policy::uniform(pool.n()).expect("pool has at least one candidate")
}

/// Softmax of `logprob / temperature` over the pool, max-shifted for stability.
pub fn model_reference(pool: &CandidatePool, temperature: f64) -> Result<Policy> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "temperature must be finite and > 0, got {temperature}"
        )));
    }
    let logprobs = pool.logprobs()?;
    let scaled: Vec<f64> = logprobs.iter().map(|lp| lp / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Policy::new(weights.into_iter().map(|w| w / total).collect())
}
