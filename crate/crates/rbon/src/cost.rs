//! Cosine-distance costs between candidate embeddings.
//!
//! The cost of moving between two candidates is `1 - cos(emb_a, emb_b)`,
//! clamped to [0, 2]. A pool's pairwise costs form a symmetric matrix with a
//! zero diagonal; that matrix is the input to every transport computation.

use crate::error::{Error, Result};
use crate::pool::CandidatePool;

/// Symmetric N x N cost matrix with zero diagonal and entries in [0, 2].
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    /// Validates shape, the exact-zero diagonal, exact symmetry, and the
    /// [0, 2] entry range.
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("cost matrix must be at least 1x1".to_string()));
        }
        if values.len() != n * n {
            return Err(Error::SizeMismatch(format!(
                "cost matrix for n={n} needs {} values, got {}",
                n * n,
                values.len()
            )));
        }
        for i in 0..n {
            if values[i * n + i] != 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "cost diagonal entry ({i},{i}) is {}, must be exactly 0",
                    values[i * n + i]
                )));
            }
            for j in 0..n {
                let v = values[i * n + j];
                if !v.is_finite() || !(0.0..=2.0).contains(&v) {
                    return Err(Error::InvalidParameter(format!(
                        "cost entry ({i},{j}) is {v}, must lie in [0, 2]"
                    )));
                }
                if values[j * n + i] != v {
                    return Err(Error::InvalidParameter(format!(
                        "cost entries ({i},{j}) and ({j},{i}) differ: {v} vs {}",
                        values[j * n + i]
                    )));
                }
            }
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Cosine distance `1 - a.b / (|a||b|)` clamped to [0, 2].
///
/// Identical inputs return exactly 0.
pub fn cosine_cost(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch(format!(
            "embedding dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidParameter("empty embedding".to_string()));
    }
    if a == b {
        return Ok(0.0);
    }
    let norm_a = norm(a);
    let norm_b = norm(b);
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(Error::InvalidParameter("zero-norm embedding".to_string()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(cost_from_cosine(dot / (norm_a * norm_b)))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cost_from_cosine(cos: f64) -> f64 {
    (1.0 - cos.clamp(-1.0, 1.0)).clamp(0.0, 2.0)
}

/// The pool's pairwise cosine-distance matrix.
///
/// Pool invariants (shared dimension, nonzero norms) make this total; each
/// unordered pair is computed once so the result is exactly symmetric.
pub fn cost_matrix(pool: &CandidatePool) -> CostMatrix {
    let n = pool.n();
    let embeddings: Vec<&[f64]> = pool
        .candidates()
        .iter()
        .map(|c| c.embedding.as_slice())
        .collect();
    let norms: Vec<f64> = embeddings.iter().map(|e| norm(e)).collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let cost = if embeddings[i] == embeddings[j] {
                0.0
            } else {
                let dot: f64 = embeddings[i].iter().zip(embeddings[j]).map(|(x, y)| x * y).sum();
                cost_from_cosine(dot / (norms[i] * norms[j]))
            };
            values[i * n + j] = cost;
            values[j * n + i] = cost;
        }
    }
    CostMatrix::new(n, values).expect("pairwise cosine costs satisfy the matrix invariants")
}

/// Mean cost from candidate i to the whole pool: `(1/N) * sum_j C[i][j]`.
///
/// Against the empirical reference this is the pool's transport distance to
/// the point mass at i, since that coupling is forced.
pub fn mean_cost_row(c: &CostMatrix, i: usize) -> Result<f64> {
    if i >= c.n() {
        return Err(Error::IndexOutOfRange { index: i, n: c.n() });
    }
    Ok(c.row(i).iter().sum::<f64>() / c.n() as f64)
}

/// Test fixture: a pool whose candidates carry only embeddings.
#[cfg(test)]
pub(crate) fn pool_from_embeddings(embeddings: &[Vec<f64>]) -> CandidatePool {
    let candidates = embeddings
        .iter()
        .map(|e| crate::pool::Candidate {
            text: None,
            token_len: 1,
            logprob_ref: None,
            rewards: std::collections::BTreeMap::new(),
            embedding: e.clone(),
        })
        .collect();
    CandidatePool::new("p", candidates).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_cost_hits_the_anchor_angles() {
        assert_eq!(cosine_cost(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_cost(&[2.5, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_cost(&[1.0, 0.0], &[-3.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn cosine_cost_is_scale_invariant() {
        let a = [0.3, -1.2, 0.7];
        let b = [-0.4, 0.9, 2.0];
        let base = cosine_cost(&a, &b).unwrap();
        let scaled_a: Vec<f64> = a.iter().map(|x| x * 7.5).collect();
        let scaled_b: Vec<f64> = b.iter().map(|x| x * 0.03).collect();
        assert_abs_diff_eq!(cosine_cost(&scaled_a, &scaled_b).unwrap(), base, epsilon = 1e-12);
    }

    #[test]
    fn cosine_cost_rejects_bad_inputs() {
        assert!(cosine_cost(&[1.0], &[1.0, 0.0]).is_err());
        assert!(cosine_cost(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_cost(&[], &[]).is_err());
    }

    #[test]
    fn cost_matrix_of_identical_embeddings_is_zero() {
        let pool = pool_from_embeddings(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        let c = cost_matrix(&pool);
        assert_eq!(c.values(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cost_matrix_of_orthogonal_embeddings() {
        let pool = pool_from_embeddings(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let c = cost_matrix(&pool);
        assert_eq!(c.at(0, 1), 1.0);
        assert_eq!(c.at(1, 0), 1.0);
        assert_eq!(c.at(0, 0), 0.0);
    }

    #[test]
    fn cost_matrix_agrees_with_pairwise_cosine_cost() {
        let embeddings: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                (0..5)
                    .map(|d| ((i * 5 + d) as f64 * 0.37).sin() + 0.1)
                    .collect()
            })
            .collect();
        let pool = pool_from_embeddings(&embeddings);
        let c = cost_matrix(&pool);
        for i in 0..8 {
            assert_eq!(c.at(i, i), 0.0);
            for j in 0..8 {
                assert_eq!(c.at(i, j), c.at(j, i));
                assert!((0.0..=2.0).contains(&c.at(i, j)));
                if i != j {
                    let direct = cosine_cost(&embeddings[i], &embeddings[j]).unwrap();
                    assert_abs_diff_eq!(c.at(i, j), direct, epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn cost_matrix_validation_rejects_asymmetry_and_bad_diagonal() {
        assert!(CostMatrix::new(2, vec![0.0, 0.3, 0.4, 0.0]).is_err());
        assert!(CostMatrix::new(2, vec![0.1, 0.3, 0.3, 0.0]).is_err());
        assert!(CostMatrix::new(2, vec![0.0, 2.5, 2.5, 0.0]).is_err());
        assert!(CostMatrix::new(2, vec![0.0, 0.3, 0.3]).is_err());
        assert!(CostMatrix::new(2, vec![0.0, 0.3, 0.3, 0.0]).is_ok());
    }

    #[test]
    fn mean_cost_row_averages_over_the_pool() {
        let c = CostMatrix::new(2, vec![0.0, 0.6, 0.6, 0.0]).unwrap();
        assert_abs_diff_eq!(mean_cost_row(&c, 0).unwrap(), 0.3, epsilon = 1e-15);
        let zero = CostMatrix::new(3, vec![0.0; 9]).unwrap();
        assert_eq!(mean_cost_row(&zero, 2).unwrap(), 0.0);
        assert!(mean_cost_row(&c, 2).is_err());
    }
}
