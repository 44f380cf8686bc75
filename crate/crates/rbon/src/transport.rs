//! Exact discrete optimal transport between policies over one pool.
//!
//! The primal problem is the coupling linear program: minimize `<gamma, C>`
//! over nonnegative matrices whose row sums are `nu` and column sums are
//! `mu`. It is solved exactly with a transportation simplex that also yields
//! node potentials, so optimality is certifiable from the output alone.
//!
//! The dual problem maximizes `<f, nu - mu>` over potentials satisfying
//! `|f_i - f_j| <= C_ij`. That feasible set only sees the cost matrix through
//! its shortest-path (metric) closure, so the dual optimum equals the primal
//! transport value over the closure. On costs satisfying the triangle
//! inequality the two problems coincide and [`duality_gap`] certifies both
//! solvers at once; on costs that violate it (cosine distance between
//! acute-angle embeddings does) the dual value is genuinely lower and the gap
//! reports that shortfall honestly. [`wd_dual`] always returns a potential
//! that is feasible for the original costs and attains the dual optimum.

use crate::cost::CostMatrix;
use crate::error::{Error, Result};
use crate::pool::Policy;

/// Tolerance for a plan's row/column sums matching its marginals.
pub const MARGINAL_TOL: f64 = 1e-8;

/// Tolerance for a potential's pairwise differences staying under the costs.
pub const LIPSCHITZ_TOL: f64 = 1e-8;

/// Reduced costs larger than this are treated as optimal in the simplex.
const RC_TOL: f64 = 1e-11;

/// A coupling between two policies over the same candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    n: usize,
    gamma: Vec<f64>,
    source: Policy,
    target: Policy,
}

impl TransportPlan {
    /// Validates nonnegativity and that row/column sums reproduce the
    /// marginals within [`MARGINAL_TOL`].
    pub fn new(gamma: Vec<f64>, source: Policy, target: Policy) -> Result<Self> {
        let n = source.len();
        if target.len() != n {
            return Err(Error::SizeMismatch(format!(
                "marginals have lengths {n} and {}",
                target.len()
            )));
        }
        if gamma.len() != n * n {
            return Err(Error::SizeMismatch(format!(
                "plan for n={n} needs {} entries, got {}",
                n * n,
                gamma.len()
            )));
        }
        if gamma.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::Numeric("transport plan has a negative entry".to_string()));
        }
        let plan = Self {
            n,
            gamma,
            source,
            target,
        };
        let residual = plan.max_marginal_residual();
        if residual > MARGINAL_TOL {
            return Err(Error::Numeric(format!(
                "transport plan marginal residual {residual:e} exceeds {MARGINAL_TOL:e}"
            )));
        }
        Ok(plan)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.gamma[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.gamma
    }

    pub fn source(&self) -> &Policy {
        &self.source
    }

    pub fn target(&self) -> &Policy {
        &self.target
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.gamma[i * self.n..(i + 1) * self.n].iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|j| (0..self.n).map(|i| self.gamma[i * self.n + j]).sum())
            .collect()
    }

    /// Largest deviation of any row/column sum from its marginal.
    pub fn max_marginal_residual(&self) -> f64 {
        let rows = self.row_sums();
        let cols = self.col_sums();
        let mut worst = 0.0f64;
        for (got, want) in rows.iter().zip(self.source.probs()) {
            worst = worst.max((got - want).abs());
        }
        for (got, want) in cols.iter().zip(self.target.probs()) {
            worst = worst.max((got - want).abs());
        }
        worst
    }
}

/// A Kantorovich potential: one value per candidate with pairwise differences
/// bounded by the costs.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotential {
    f: Vec<f64>,
}

impl DualPotential {
    /// Validates `|f_i - f_j| <= C_ij` within [`LIPSCHITZ_TOL`].
    pub fn new(f: Vec<f64>, c: &CostMatrix) -> Result<Self> {
        let check = check_lipschitz(&f, c, LIPSCHITZ_TOL)?;
        if !check.ok {
            let worst = check.worst.expect("violating check reports a pair");
            return Err(Error::Numeric(format!(
                "potential violates the cost bound at pair ({}, {}) by {:e}",
                worst.i, worst.j, worst.excess
            )));
        }
        Ok(Self { f })
    }

    pub fn values(&self) -> &[f64] {
        &self.f
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    /// The dual objective `<f, nu - mu>`.
    pub fn objective(&self, nu: &Policy, mu: &Policy) -> Result<f64> {
        if nu.len() != self.f.len() || mu.len() != self.f.len() {
            return Err(Error::SizeMismatch(format!(
                "potential has {} entries, marginals have {} and {}",
                self.f.len(),
                nu.len(),
                mu.len()
            )));
        }
        Ok(self
            .f
            .iter()
            .zip(nu.probs().iter().zip(mu.probs()))
            .map(|(f, (a, b))| f * (a - b))
            .sum())
    }
}

/// The most-stressed pair found by [`check_lipschitz`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzViolation {
    pub i: usize,
    pub j: usize,
    /// `|f_i - f_j| - C_ij`; positive means the bound is broken.
    pub excess: f64,
}

/// Result of checking a potential against a cost matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzCheck {
    pub ok: bool,
    /// The pair with the largest excess, `None` only for single-point inputs.
    pub worst: Option<LipschitzViolation>,
}

/// Checks `|f_i - f_j| <= C_ij + tol` for all pairs, reporting the worst one.
pub fn check_lipschitz(f: &[f64], c: &CostMatrix, tol: f64) -> Result<LipschitzCheck> {
    let n = c.n();
    if f.len() != n {
        return Err(Error::SizeMismatch(format!(
            "potential has {} entries, cost matrix is {n}x{n}",
            f.len()
        )));
    }
    if f.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("potential has a non-finite entry".to_string()));
    }
    let mut worst: Option<LipschitzViolation> = None;
    for i in 0..n {
        for j in (i + 1)..n {
            let excess = (f[i] - f[j]).abs() - c.at(i, j);
            if worst.is_none_or(|w| excess > w.excess) {
                worst = Some(LipschitzViolation { i, j, excess });
            }
        }
    }
    let ok = worst.is_none_or(|w| w.excess <= tol);
    Ok(LipschitzCheck { ok, worst })
}

/// The c-transform `f^c(j) = min_i (C_ij - f_i)`.
///
/// For a potential already satisfying the pairwise cost bounds this equals
/// `-f` (the zero diagonal forces it), so applying it twice is the identity
/// on feasible potentials.
pub fn c_transform(f: &[f64], c: &CostMatrix) -> Result<Vec<f64>> {
    let n = c.n();
    if f.len() != n {
        return Err(Error::SizeMismatch(format!(
            "potential has {} entries, cost matrix is {n}x{n}",
            f.len()
        )));
    }
    if f.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("potential has a non-finite entry".to_string()));
    }
    Ok((0..n)
        .map(|j| {
            (0..n)
                .map(|i| c.at(i, j) - f[i])
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// All-pairs shortest-path closure of a cost matrix.
///
/// The result is the largest matrix below `c` that satisfies the triangle
/// inequality; it equals `c` exactly when `c` already does.
pub fn metric_closure(c: &CostMatrix) -> CostMatrix {
    let n = c.n();
    let mut d = c.values().to_vec();
    for k in 0..n {
        for i in 0..n {
            let dik = d[i * n + k];
            for j in 0..n {
                let via = dik + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    CostMatrix::new(n, d).expect("shortest-path closure preserves the matrix invariants")
}

/// Exact transport value between two policies, with an optimal coupling.
pub fn wd_primal(nu: &Policy, mu: &Policy, c: &CostMatrix) -> Result<(f64, TransportPlan)> {
    let n = check_sizes(nu, mu, c)?;
    let reduced = Reduced::build(nu, mu, c.values());
    let solution = transportation_simplex(&reduced.supply, &reduced.demand, &reduced.cost)?;

    let mut gamma = vec![0.0; n * n];
    let mut value = 0.0;
    for (r, &i) in reduced.rows.iter().enumerate() {
        for (s, &j) in reduced.cols.iter().enumerate() {
            let flow = solution.flow[r * reduced.cols.len() + s];
            if flow != 0.0 {
                gamma[i * n + j] = flow;
                value += flow * c.at(i, j);
            }
        }
    }
    let plan = TransportPlan::new(gamma, nu.clone(), mu.clone())?;
    Ok((value, plan))
}

/// Exact optimum of `max <f, nu - mu>` subject to `|f_i - f_j| <= C_ij`.
///
/// Solved through the metric closure: the constraint set is identical for
/// `c` and its closure (telescoping along shortest paths), and over the
/// closure the transportation duals polish into a single feasible potential
/// attaining the transport value. The returned potential always satisfies
/// the original cost bounds.
pub fn wd_dual(nu: &Policy, mu: &Policy, c: &CostMatrix) -> Result<(f64, DualPotential)> {
    let n = check_sizes(nu, mu, c)?;
    if nu.probs() == mu.probs() {
        return Ok((0.0, DualPotential::new(vec![0.0; n], c)?));
    }
    let cbar = metric_closure(c);
    let reduced = Reduced::build(nu, mu, cbar.values());
    let solution = transportation_simplex(&reduced.supply, &reduced.demand, &reduced.cost)?;

    // Extend the reduced row potentials to every index: first the best
    // column response to the active rows, then the best row response to
    // that. Both steps are infimal convolutions with rows of the closure,
    // so the result satisfies its triangle inequality as a cost bound.
    let g: Vec<f64> = (0..n)
        .map(|j| {
            reduced
                .rows
                .iter()
                .enumerate()
                .map(|(r, &i)| cbar.at(i, j) - solution.u[r])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let f: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| cbar.at(i, j) - g[j])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();

    let potential = DualPotential::new(f, c)?;
    let value = potential.objective(nu, mu)?;
    Ok((value, potential))
}

/// `|wd_primal - wd_dual|` for one instance.
///
/// Zero (within solver precision) exactly when the costs satisfy the
/// triangle inequality; positive gaps measure how much the single-potential
/// dual undercuts the coupling optimum on non-metric costs.
pub fn duality_gap(nu: &Policy, mu: &Policy, c: &CostMatrix) -> Result<f64> {
    let (primal, _) = wd_primal(nu, mu, c)?;
    let (dual, _) = wd_dual(nu, mu, c)?;
    Ok((primal - dual).abs())
}

fn check_sizes(nu: &Policy, mu: &Policy, c: &CostMatrix) -> Result<usize> {
    let n = c.n();
    if nu.len() != n || mu.len() != n {
        return Err(Error::SizeMismatch(format!(
            "marginals have lengths {} and {}, cost matrix is {n}x{n}",
            nu.len(),
            mu.len()
        )));
    }
    Ok(n)
}

/// The strictly positive sub-problem of a transport instance.
struct Reduced {
    rows: Vec<usize>,
    cols: Vec<usize>,
    supply: Vec<f64>,
    demand: Vec<f64>,
    cost: Vec<f64>,
}

impl Reduced {
    fn build(nu: &Policy, mu: &Policy, c: &[f64]) -> Self {
        let n = nu.len();
        let rows: Vec<usize> = (0..n).filter(|&i| nu.probs()[i] > 0.0).collect();
        let cols: Vec<usize> = (0..n).filter(|&j| mu.probs()[j] > 0.0).collect();
        let supply: Vec<f64> = rows.iter().map(|&i| nu.probs()[i]).collect();
        let demand: Vec<f64> = cols.iter().map(|&j| mu.probs()[j]).collect();
        let mut cost = Vec::with_capacity(rows.len() * cols.len());
        for &i in &rows {
            for &j in &cols {
                cost.push(c[i * n + j]);
            }
        }
        Self {
            rows,
            cols,
            supply,
            demand,
            cost,
        }
    }
}

struct SimplexSolution {
    flow: Vec<f64>,
    u: Vec<f64>,
    #[allow(dead_code)]
    v: Vec<f64>,
}

/// Transportation simplex over strictly positive, balanced marginals.
///
/// Maintains a spanning-tree basis of m + n - 1 cells. Entering variable by
/// most negative reduced cost, switching to lowest-index (Bland) selection if
/// degenerate pivots stall; leaving variable by minimum flow on the cycle's
/// odd positions with lowest-index tie-breaks.
fn transportation_simplex(supply: &[f64], demand: &[f64], cost: &[f64]) -> Result<SimplexSolution> {
    let m = supply.len();
    let n = demand.len();
    debug_assert!(m > 0 && n > 0 && cost.len() == m * n);

    let mut flow = vec![0.0f64; m * n];
    let mut in_basis = vec![false; m * n];
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(m + n - 1);

    // Northwest-corner start: always yields exactly m + n - 1 basic cells
    // forming a spanning tree, inserting zero-flow cells on ties.
    {
        let mut a = supply.to_vec();
        let mut b = demand.to_vec();
        let (mut i, mut j) = (0, 0);
        loop {
            let x = a[i].min(b[j]);
            flow[i * n + j] = x;
            in_basis[i * n + j] = true;
            basis.push((i, j));
            a[i] -= x;
            b[j] -= x;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if a[i] <= b[j] && i < m - 1 {
                i += 1;
            } else if j < n - 1 {
                j += 1;
            } else {
                i += 1;
            }
        }
    }

    let nodes = m + n;
    let max_iter = 1000 + 60 * nodes * nodes.min(64);
    let stall_limit = 200 + 10 * nodes;
    let mut stall = 0usize;
    let mut bland = false;
    let mut u = vec![0.0f64; m];
    let mut v = vec![0.0f64; n];

    for _ in 0..max_iter {
        // Node potentials from the tree: u_i + v_j = c_ij on basic cells.
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
        for (idx, &(i, j)) in basis.iter().enumerate() {
            adj[i].push((m + j, idx));
            adj[m + j].push((i, idx));
        }
        rebuild_potentials(&adj, &basis, cost, n, &mut u, &mut v);

        // Entering cell.
        let mut entering: Option<(usize, usize, f64)> = None;
        'scan: for i in 0..m {
            for j in 0..n {
                if in_basis[i * n + j] {
                    continue;
                }
                let rc = cost[i * n + j] - u[i] - v[j];
                if rc < -RC_TOL {
                    if bland {
                        entering = Some((i, j, rc));
                        break 'scan;
                    }
                    if entering.is_none_or(|(_, _, best)| rc < best) {
                        entering = Some((i, j, rc));
                    }
                }
            }
        }
        let Some((ei, ej, _)) = entering else {
            return Ok(SimplexSolution { flow, u, v });
        };

        // Unique tree path from row node ei to column node m + ej.
        let path = tree_path(&adj, ei, m + ej, nodes);

        // Arcs along the path alternate orientation: even positions lose
        // flow when the entering cell gains it.
        let mut theta = f64::INFINITY;
        let mut leaving: Option<usize> = None;
        for (k, pair) in path.windows(2).enumerate() {
            if k % 2 != 0 {
                continue;
            }
            let (i, j) = cell_of(pair[0], pair[1], m);
            let x = flow[i * n + j];
            let better = match leaving {
                None => true,
                Some(prev) => {
                    let (pi, pj) = basis[prev];
                    x < theta || (x == theta && i * n + j < pi * n + pj)
                }
            };
            if better {
                theta = x;
                leaving = Some(basis_index(&basis, i, j));
            }
        }
        let leaving = leaving.ok_or_else(|| {
            Error::Numeric("transport basis lost its tree structure".to_string())
        })?;

        for (k, pair) in path.windows(2).enumerate() {
            let (i, j) = cell_of(pair[0], pair[1], m);
            if k % 2 == 0 {
                flow[i * n + j] -= theta;
            } else {
                flow[i * n + j] += theta;
            }
        }
        let (li, lj) = basis[leaving];
        flow[li * n + lj] = 0.0;
        in_basis[li * n + lj] = false;
        basis[leaving] = (ei, ej);
        in_basis[ei * n + ej] = true;
        flow[ei * n + ej] = theta;

        if theta > 1e-15 {
            stall = 0;
        } else {
            stall += 1;
            if stall > stall_limit {
                bland = true;
            }
        }
    }
    Err(Error::Numeric("transportation simplex did not converge".to_string()))
}

fn rebuild_potentials(
    adj: &[Vec<(usize, usize)>],
    basis: &[(usize, usize)],
    cost: &[f64],
    n: usize,
    u: &mut [f64],
    v: &mut [f64],
) {
    let m = u.len();
    let nodes = m + v.len();
    let mut known = vec![false; nodes];
    let mut stack = vec![0usize];
    u[0] = 0.0;
    known[0] = true;
    while let Some(node) = stack.pop() {
        for &(next, arc) in &adj[node] {
            if known[next] {
                continue;
            }
            let (i, j) = basis[arc];
            if next >= m {
                v[next - m] = cost[i * n + j] - u[i];
            } else {
                u[next] = cost[i * n + j] - v[j];
            }
            known[next] = true;
            stack.push(next);
        }
    }
}

fn tree_path(adj: &[Vec<(usize, usize)>], from: usize, to: usize, nodes: usize) -> Vec<usize> {
    let mut parent = vec![usize::MAX; nodes];
    let mut seen = vec![false; nodes];
    let mut stack = vec![from];
    seen[from] = true;
    while let Some(node) = stack.pop() {
        if node == to {
            break;
        }
        for &(next, _) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = node;
                stack.push(next);
            }
        }
    }
    let mut path = vec![to];
    let mut node = to;
    while node != from {
        node = parent[node];
        path.push(node);
    }
    path.reverse();
    path
}

fn cell_of(a: usize, b: usize, m: usize) -> (usize, usize) {
    if a < m {
        (a, b - m)
    } else {
        (b, a - m)
    }
}

fn basis_index(basis: &[(usize, usize)], i: usize, j: usize) -> usize {
    basis
        .iter()
        .position(|&cell| cell == (i, j))
        .expect("cycle arcs are basic")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn policy(p: &[f64]) -> Policy {
        Policy::new(p.to_vec()).unwrap()
    }

    fn random_policy(rng: &mut ChaCha8Rng, n: usize, allow_zeros: bool) -> Policy {
        let mut w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        if allow_zeros && n > 1 {
            let zeros = rng.gen_range(0..n);
            for _ in 0..zeros {
                let k = rng.gen_range(0..n);
                w[k] = 0.0;
            }
            if w.iter().all(|x| *x == 0.0) {
                w[0] = 1.0;
            }
        }
        let total: f64 = w.iter().sum();
        Policy::new(w.into_iter().map(|x| x / total).collect()).unwrap()
    }

    /// Distances between random points on a line segment, scaled into [0, 2]:
    /// an exact metric.
    fn random_metric_matrix(rng: &mut ChaCha8Rng, n: usize) -> CostMatrix {
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen::<f64>(), rng.gen::<f64>()))
            .collect();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = points[i].0 - points[j].0;
                let dy = points[i].1 - points[j].1;
                let d = (dx * dx + dy * dy).sqrt();
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        CostMatrix::new(n, values).unwrap()
    }

    fn random_cosine_matrix(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> CostMatrix {
        let embeddings: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let pool = crate::cost::pool_from_embeddings(&embeddings);
        crate::cost::cost_matrix(&pool)
    }

    #[test]
    fn primal_matches_forced_couplings() {
        let c = CostMatrix::new(2, vec![0.0, 0.4, 0.4, 0.0]).unwrap();
        let (value, plan) = wd_primal(&policy(&[1.0, 0.0]), &policy(&[0.0, 1.0]), &c).unwrap();
        assert_abs_diff_eq!(value, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(plan.at(0, 1), 1.0, epsilon = 1e-15);

        let (value, plan) = wd_primal(&policy(&[0.5, 0.5]), &policy(&[1.0, 0.0]), &c).unwrap();
        assert_abs_diff_eq!(value, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(plan.at(1, 0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn primal_on_equal_marginals_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1usize, 2, 5, 9] {
            let c = random_cosine_matrix(&mut rng, n, 4);
            let p = random_policy(&mut rng, n, false);
            let (value, plan) = wd_primal(&p, &p, &c).unwrap();
            assert_abs_diff_eq!(value, 0.0, epsilon = 1e-12);
            assert!(plan.max_marginal_residual() <= MARGINAL_TOL);
        }
    }

    #[test]
    fn primal_solution_carries_an_optimality_certificate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let n = 2 + (trial % 9);
            let c = if trial % 2 == 0 {
                random_cosine_matrix(&mut rng, n, 3)
            } else {
                random_metric_matrix(&mut rng, n)
            };
            let nu = random_policy(&mut rng, n, true);
            let mu = random_policy(&mut rng, n, true);
            let reduced = Reduced::build(&nu, &mu, c.values());
            let solution =
                transportation_simplex(&reduced.supply, &reduced.demand, &reduced.cost).unwrap();
            let (rows, cols) = (reduced.rows.len(), reduced.cols.len());
            for r in 0..rows {
                for s in 0..cols {
                    let rc = reduced.cost[r * cols + s] - solution.u[r] - solution.v[s];
                    assert!(rc >= -1e-9, "dual infeasible: rc={rc}");
                    let x = solution.flow[r * cols + s];
                    assert!(x >= -1e-12);
                    if x > 1e-12 {
                        assert!(rc.abs() <= 1e-9, "complementary slackness broken: rc={rc}");
                    }
                }
            }
        }
    }

    #[test]
    fn primal_is_symmetric_in_its_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let n = 2 + rng.gen_range(0..7);
            let c = random_cosine_matrix(&mut rng, n, 4);
            let nu = random_policy(&mut rng, n, true);
            let mu = random_policy(&mut rng, n, true);
            let (forward, _) = wd_primal(&nu, &mu, &c).unwrap();
            let (backward, _) = wd_primal(&mu, &nu, &c).unwrap();
            assert_abs_diff_eq!(forward, backward, epsilon = 1e-10);
            assert!(forward >= 0.0);
        }
    }

    #[test]
    fn primal_survives_degenerate_tied_instances() {
        // Uniform marginals and heavily tied costs force degenerate pivots.
        for n in [2usize, 4, 8, 16] {
            let mut values = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        values[i * n + j] = if (i + j) % 2 == 0 { 1.0 } else { 0.5 };
                    }
                }
            }
            let c = CostMatrix::new(n, values).unwrap();
            let nu = Policy::uniform(n).unwrap();
            let mu = Policy::uniform(n).unwrap();
            let (value, plan) = wd_primal(&nu, &mu, &c).unwrap();
            assert_abs_diff_eq!(value, 0.0, epsilon = 1e-12);
            assert!(plan.max_marginal_residual() <= MARGINAL_TOL);

            let shifted: Vec<f64> = (0..n)
                .map(|i| if i == 0 { 0.0 } else { 1.0 / (n - 1) as f64 })
                .collect();
            let (value, _) = wd_primal(&Policy::new(shifted).unwrap(), &mu, &c).unwrap();
            assert!(value.is_finite() && value >= 0.0);
        }
    }

    #[test]
    fn dual_equals_primal_on_metric_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..150 {
            let n = 2 + (trial % 8);
            let c = if trial % 2 == 0 {
                random_metric_matrix(&mut rng, n)
            } else {
                metric_closure(&random_cosine_matrix(&mut rng, n, 3))
            };
            let nu = random_policy(&mut rng, n, trial % 3 == 0);
            let mu = random_policy(&mut rng, n, trial % 3 == 0);
            let gap = duality_gap(&nu, &mu, &c).unwrap();
            assert!(gap <= 1e-6, "gap {gap:e} on metric instance");
        }
    }

    #[test]
    fn dual_point_mass_pair_recovers_the_direct_cost() {
        let c = CostMatrix::new(2, vec![0.0, 0.4, 0.4, 0.0]).unwrap();
        let (value, potential) =
            wd_dual(&policy(&[1.0, 0.0]), &policy(&[0.0, 1.0]), &c).unwrap();
        assert_abs_diff_eq!(value, 0.4, epsilon = 1e-12);
        let f = potential.values();
        assert_abs_diff_eq!(f[0] - f[1], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(
            duality_gap(&policy(&[1.0, 0.0]), &policy(&[0.0, 1.0]), &c).unwrap(),
            0.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn dual_on_equal_marginals_returns_zero_potential() {
        let c = CostMatrix::new(3, vec![0.0, 0.5, 1.0, 0.5, 0.0, 0.5, 1.0, 0.5, 0.0]).unwrap();
        let p = policy(&[0.2, 0.3, 0.5]);
        let (value, potential) = wd_dual(&p, &p, &c).unwrap();
        assert_eq!(value, 0.0);
        assert_eq!(potential.values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn dual_potentials_always_satisfy_the_original_cost_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for trial in 0..150 {
            let n = 2 + (trial % 8);
            // Low-dimensional cosine matrices violate the triangle
            // inequality often; the potential must stay feasible anyway.
            let c = random_cosine_matrix(&mut rng, n, 2 + (trial % 3));
            let nu = random_policy(&mut rng, n, false);
            let mu = random_policy(&mut rng, n, false);
            let (value, potential) = wd_dual(&nu, &mu, &c).unwrap();
            let check = check_lipschitz(potential.values(), &c, LIPSCHITZ_TOL).unwrap();
            assert!(check.ok);
            assert_abs_diff_eq!(
                potential.objective(&nu, &mu).unwrap(),
                value,
                epsilon = 1e-12
            );
            let (primal, _) = wd_primal(&nu, &mu, &c).unwrap();
            assert!(value <= primal + 1e-9, "dual {value} above primal {primal}");
        }
    }

    #[test]
    fn dual_value_matches_the_closure_transport_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..100 {
            let n = 2 + (trial % 6);
            let c = random_cosine_matrix(&mut rng, n, 2);
            let nu = random_policy(&mut rng, n, true);
            let mu = random_policy(&mut rng, n, true);
            let (dual, _) = wd_dual(&nu, &mu, &c).unwrap();
            let (closed_primal, _) = wd_primal(&nu, &mu, &metric_closure(&c)).unwrap();
            assert_abs_diff_eq!(dual, closed_primal, epsilon = 1e-9);
        }
    }

    /// Embeddings at 0, 45, and 90 degrees: the direct 0-to-90 cost (1.0)
    /// exceeds the two-hop route (2 * (1 - cos 45) ~ 0.586), so the
    /// single-potential dual genuinely undercuts the coupling optimum.
    #[test]
    fn acute_angles_produce_a_real_duality_gap() {
        let half_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        let pool = crate::cost::pool_from_embeddings(&[
            vec![1.0, 0.0],
            vec![half_sqrt2, half_sqrt2],
            vec![0.0, 1.0],
        ]);
        let c = crate::cost::cost_matrix(&pool);
        let nu = policy(&[0.8, 0.1, 0.1]);
        let mu = policy(&[0.1, 0.1, 0.8]);

        let (primal, _) = wd_primal(&nu, &mu, &c).unwrap();
        let (dual, potential) = wd_dual(&nu, &mu, &c).unwrap();
        let a = 1.0 - half_sqrt2;
        assert_abs_diff_eq!(primal, 0.6 + 0.2 * a, epsilon = 1e-12);
        assert_abs_diff_eq!(dual, 1.4 * a, epsilon = 1e-12);
        assert!(primal - dual > 0.24);
        assert!(check_lipschitz(potential.values(), &c, LIPSCHITZ_TOL).unwrap().ok);
    }

    #[test]
    fn c_transform_of_zero_is_zero() {
        let c = CostMatrix::new(3, vec![0.0, 0.5, 1.0, 0.5, 0.0, 0.5, 1.0, 0.5, 0.0]).unwrap();
        assert_eq!(c_transform(&[0.0; 3], &c).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn c_transform_matches_the_two_point_hand_case() {
        let c = CostMatrix::new(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let fc = c_transform(&[0.3, 0.0], &c).unwrap();
        assert_abs_diff_eq!(fc[0], -0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(fc[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn c_transform_is_an_involution_on_feasible_potentials() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for trial in 0..100 {
            let n = 2 + (trial % 7);
            let c = random_cosine_matrix(&mut rng, n, 3);
            // Scale a raw vector until it satisfies the pairwise bounds.
            let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let mut scale = 1.0f64;
            for i in 0..n {
                for j in (i + 1)..n {
                    let diff = (raw[i] - raw[j]).abs();
                    if diff > 0.0 {
                        scale = scale.min(c.at(i, j) / diff);
                    }
                }
            }
            let f: Vec<f64> = raw.iter().map(|x| x * scale * 0.999).collect();
            let fc = c_transform(&f, &c).unwrap();
            let fcc = c_transform(&fc, &c).unwrap();
            for i in 0..n {
                assert_abs_diff_eq!(fc[i], -f[i], epsilon = 1e-9);
                assert_abs_diff_eq!(fcc[i], f[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn check_lipschitz_flags_the_worst_pair() {
        let c = CostMatrix::new(2, vec![0.0, 0.5, 0.5, 0.0]).unwrap();
        let ok = check_lipschitz(&[0.2, 0.0], &c, LIPSCHITZ_TOL).unwrap();
        assert!(ok.ok);
        let bad = check_lipschitz(&[1.0, 0.0], &c, LIPSCHITZ_TOL).unwrap();
        assert!(!bad.ok);
        let worst = bad.worst.unwrap();
        assert_eq!((worst.i, worst.j), (0, 1));
        assert_abs_diff_eq!(worst.excess, 0.5, epsilon = 1e-15);

        let constant = check_lipschitz(&[0.7; 2], &c, LIPSCHITZ_TOL).unwrap();
        assert!(constant.ok);
    }

    #[test]
    fn metric_closure_shrinks_shortcuts_and_is_idempotent() {
        let c = CostMatrix::new(3, vec![0.0, 0.3, 1.0, 0.3, 0.0, 0.3, 1.0, 0.3, 0.0]).unwrap();
        let closed = metric_closure(&c);
        assert_abs_diff_eq!(closed.at(0, 2), 0.6, epsilon = 1e-15);
        assert_eq!(closed.at(0, 1), 0.3);
        assert_eq!(metric_closure(&closed), closed);

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let n = 2 + rng.gen_range(0..8);
            let c = random_cosine_matrix(&mut rng, n, 2);
            let closed = metric_closure(&c);
            for i in 0..n {
                for j in 0..n {
                    assert!(closed.at(i, j) <= c.at(i, j) + 1e-15);
                    for k in 0..n {
                        assert!(
                            closed.at(i, j) <= closed.at(i, k) + closed.at(k, j) + 1e-12,
                            "closure violates the triangle inequality"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn single_candidate_transport_is_trivial() {
        let c = CostMatrix::new(1, vec![0.0]).unwrap();
        let one = policy(&[1.0]);
        let (value, plan) = wd_primal(&one, &one, &c).unwrap();
        assert_eq!(value, 0.0);
        assert_eq!(plan.values(), &[1.0]);
        let (dual, potential) = wd_dual(&one, &one, &c).unwrap();
        assert_eq!(dual, 0.0);
        assert_eq!(potential.values(), &[0.0]);
    }

    #[test]
    fn plan_validation_rejects_bad_marginals() {
        let nu = policy(&[0.5, 0.5]);
        let mu = policy(&[1.0, 0.0]);
        assert!(TransportPlan::new(vec![0.25; 4], nu.clone(), mu.clone()).is_err());
        assert!(TransportPlan::new(vec![0.5, 0.0, 0.5, 0.0], nu, mu).is_ok());
    }
}
