//! Exact optimal-transport distances.
//!
//! `w1_discrete` solves the transportation linear program exactly with the
//! transportation simplex (north-west-corner start, MODI potentials). The
//! diagonal-Gaussian 2-Wasserstein distance has a closed form.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Normalization tolerance for probability vectors.
pub const MASS_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum OtError {
    #[error("distribution mass {0} differs from 1 by more than {MASS_TOL}")]
    Unnormalized(f64),
    #[error("negative or non-finite mass {value} at index {index}")]
    BadMass { index: usize, value: f64 },
    #[error("support sizes differ: {0} vs {1}")]
    SupportMismatch(usize, usize),
    #[error("cost matrix is not a {n}x{n} pseudometric: {reason}")]
    BadCost { n: usize, reason: String },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("standard deviation must be positive and finite, got {value} at index {index}")]
    BadSigma { index: usize, value: f64 },
    #[error("transportation simplex failed: {0}")]
    Internal(String),
}

/// Probability vector over a finite support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    p: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(p: Vec<f64>) -> Result<Self, OtError> {
        for (index, &value) in p.iter().enumerate() {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(OtError::BadMass { index, value });
            }
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(OtError::Unnormalized(total));
        }
        Ok(Self { p })
    }

    pub fn point_mass(n: usize, at: usize) -> Self {
        let mut p = vec![0.0; n];
        p[at] = 1.0;
        Self { p }
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Gaussian with diagonal covariance, parameterized by standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self, OtError> {
        if mu.len() != sigma.len() {
            return Err(OtError::DimMismatch(mu.len(), sigma.len()));
        }
        for (index, &value) in sigma.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(OtError::BadSigma { index, value });
            }
        }
        Ok(Self { mu, sigma })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `W2² = ‖μ_a − μ_b‖² + ‖σ_a − σ_b‖²` for diagonal Gaussians.
pub fn w2_squared_diag_gaussian(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64, OtError> {
    if a.dim() != b.dim() {
        return Err(OtError::DimMismatch(a.dim(), b.dim()));
    }
    let mean: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum();
    let cov: f64 = a.sigma.iter().zip(&b.sigma).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(mean + cov)
}

pub fn w2_diag_gaussian(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64, OtError> {
    w2_squared_diag_gaussian(a, b).map(f64::sqrt)
}

/// Square cost matrix stored row-major.
fn validate_cost(n: usize, cost: &[f64]) -> Result<(), OtError> {
    let bad = |reason: String| Err(OtError::BadCost { n, reason });
    if cost.len() != n * n {
        return bad(format!("{} entries", cost.len()));
    }
    for i in 0..n {
        if cost[i * n + i] != 0.0 {
            return bad(format!("nonzero diagonal at {i}"));
        }
        for j in 0..n {
            let c = cost[i * n + j];
            if !(c >= 0.0) || !c.is_finite() {
                return bad(format!("entry ({i},{j}) = {c}"));
            }
            let t = cost[j * n + i];
            if (c - t).abs() > 1e-12 * (1.0 + c.abs()) {
                return bad(format!("asymmetric at ({i},{j}): {c} vs {t}"));
            }
        }
    }
    Ok(())
}

/// An optimal coupling: `(source index, target index, mass)` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub cost: f64,
    pub flows: Vec<(usize, usize, f64)>,
    pub pivots: usize,
}

/// Exact 1-Wasserstein distance between `p` and `q` under the pseudometric
/// `cost` (row-major `n×n`).
pub fn w1_discrete(p: &DiscreteDistribution, q: &DiscreteDistribution, cost: &[f64]) -> Result<f64, OtError> {
    transport(p, q, cost).map(|plan| plan.cost)
}

pub fn transport(p: &DiscreteDistribution, q: &DiscreteDistribution, cost: &[f64]) -> Result<TransportPlan, OtError> {
    if p.len() != q.len() {
        return Err(OtError::SupportMismatch(p.len(), q.len()));
    }
    let n = p.len();
    validate_cost(n, cost)?;
    transport_unchecked(p.probs(), q.probs(), |i, j| cost[i * n + j])
}

/// Transportation simplex on an `m×n` problem given raw marginals. Zero-mass
/// points are pruned first. Marginal totals are assumed equal up to roundoff.
pub fn transport_unchecked(
    supply: &[f64],
    demand: &[f64],
    cost: impl Fn(usize, usize) -> f64,
) -> Result<TransportPlan, OtError> {
    let rows: Vec<usize> = (0..supply.len()).filter(|&i| supply[i] > 0.0).collect();
    let cols: Vec<usize> = (0..demand.len()).filter(|&j| demand[j] > 0.0).collect();
    if rows.is_empty() || cols.is_empty() {
        return Err(OtError::Internal("empty support".into()));
    }
    let (m, n) = (rows.len(), cols.len());
    let c: Vec<f64> = rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).map(|(i, j)| cost(i, j)).collect();
    let mut s: Vec<f64> = rows.iter().map(|&i| supply[i]).collect();
    let mut d: Vec<f64> = cols.iter().map(|&j| demand[j]).collect();

    // North-west corner: advances exactly one index per step, giving m+n−1
    // basic cells that form a spanning tree (some possibly degenerate at 0).
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(m + n - 1);
    let mut flow = vec![0.0; m * n];
    let (mut i, mut j) = (0, 0);
    loop {
        let x = s[i].min(d[j]);
        flow[i * n + j] = x.max(0.0);
        basis.push((i, j));
        s[i] -= x;
        d[j] -= x;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if i == m - 1 {
            j += 1;
        } else if j == n - 1 || s[i] <= d[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    debug_assert_eq!(basis.len(), m + n - 1);

    let mut in_basis = vec![false; m * n];
    for &(i, j) in &basis {
        in_basis[i * n + j] = true;
    }
    let max_pivots = 50 * (m * n + 10);
    let bland_after = 5 * (m * n + 10);
    let mut pivots = 0;
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    loop {
        potentials(m, n, &basis, &c, &mut u, &mut v)?;
        // Entering cell: most negative reduced cost (Dantzig), or the first
        // negative one (Bland) once many pivots suggest degenerate cycling.
        let scale = c.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
        let threshold = -1e-12 * scale;
        let mut entering = None;
        let mut best = threshold;
        'scan: for i in 0..m {
            for j in 0..n {
                if in_basis[i * n + j] {
                    continue;
                }
                let r = c[i * n + j] - u[i] - v[j];
                if r < best {
                    best = r;
                    entering = Some((i, j));
                    if pivots >= bland_after {
                        break 'scan;
                    }
                }
            }
        }
        let Some((ei, ej)) = entering else { break };
        if pivots >= max_pivots {
            return Err(OtError::Internal(format!("no convergence after {pivots} pivots")));
        }
        pivots += 1;

        let path = tree_path(m, n, &basis, ei, m + ej)?;
        // path: basis indices on the tree path from row ei to column ej.
        // Walking from the entering cell, path cells alternate −, +, −, ...
        // starting with the cell that shares column ej.
        let cycle: Vec<usize> = path.into_iter().rev().collect();
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (k, &b) in cycle.iter().enumerate() {
            if k % 2 == 0 {
                let (bi, bj) = basis[b];
                let f = flow[bi * n + bj];
                if f < theta {
                    theta = f;
                    leave = b;
                }
            }
        }
        flow[ei * n + ej] = theta;
        for (k, &b) in cycle.iter().enumerate() {
            let (bi, bj) = basis[b];
            let cell = &mut flow[bi * n + bj];
            if k % 2 == 0 {
                *cell = (*cell - theta).max(0.0);
            } else {
                *cell += theta;
            }
        }
        let (li, lj) = basis[leave];
        in_basis[li * n + lj] = false;
        flow[li * n + lj] = 0.0;
        basis[leave] = (ei, ej);
        in_basis[ei * n + ej] = true;
    }

    let mut total = 0.0;
    let mut flows = Vec::new();
    for &(i, j) in &basis {
        let f = flow[i * n + j];
        if f > 0.0 {
            total += f * c[i * n + j];
            flows.push((rows[i], cols[j], f));
        }
    }
    flows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    Ok(TransportPlan {
        cost: total,
        flows,
        pivots,
    })
}

/// Dual potentials with `u[0] = 0` and `u_i + v_j = c_ij` on basic cells.
fn potentials(m: usize, n: usize, basis: &[(usize, usize)], c: &[f64], u: &mut [f64], v: &mut [f64]) -> Result<(), OtError> {
    let adj = adjacency(m, n, basis);
    let mut seen = vec![false; m + n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    u[0] = 0.0;
    while let Some(node) = queue.pop_front() {
        for &b in &adj[node] {
            let (i, j) = basis[b];
            let other = if node < m { m + j } else { i };
            if seen[other] {
                continue;
            }
            seen[other] = true;
            if node < m {
                v[j] = c[i * n + j] - u[i];
            } else {
                u[i] = c[i * n + j] - v[j];
            }
            queue.push_back(other);
        }
    }
    if seen.iter().all(|&s| s) {
        Ok(())
    } else {
        Err(OtError::Internal("basis is not a spanning tree".into()))
    }
}

fn adjacency(m: usize, n: usize, basis: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); m + n];
    for (b, &(i, j)) in basis.iter().enumerate() {
        adj[i].push(b);
        adj[m + j].push(b);
    }
    adj
}

/// Basis indices along the unique tree path from node `from` to node `to`.
fn tree_path(m: usize, n: usize, basis: &[(usize, usize)], from: usize, to: usize) -> Result<Vec<usize>, OtError> {
    let adj = adjacency(m, n, basis);
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; m + n];
    let mut seen = vec![false; m + n];
    let mut queue = VecDeque::from([from]);
    seen[from] = true;
    while let Some(node) = queue.pop_front() {
        if node == to {
            break;
        }
        for &b in &adj[node] {
            let (i, j) = basis[b];
            let other = if node < m { m + j } else { i };
            if !seen[other] {
                seen[other] = true;
                parent[other] = Some((node, b));
                queue.push_back(other);
            }
        }
    }
    if !seen[to] {
        return Err(OtError::Internal("entering cell has no tree path".into()));
    }
    let mut path = Vec::new();
    let mut node = to;
    while node != from {
        let (prev, b) = parent[node].expect("parent on path");
        path.push(b);
        node = prev;
    }
    path.reverse();
    Ok(path)
}

/// Reference solver by exhaustive vertex enumeration.
///
/// Every vertex of the transportation polytope is the unique solution
/// supported on some spanning tree of `m+n−1` cells; enumerating all such
/// cell subsets and keeping the cheapest feasible one yields the exact
/// optimum. Exponential: only for supports of a handful of points.
pub mod reference {
    use super::OtError;

    /// Cell subsets of an `m×n` grid that form spanning trees of the
    /// row/column bipartite graph, as bitmasks over row-major cells.
    pub fn spanning_tree_bases(m: usize, n: usize) -> Vec<u64> {
        let cells = m * n;
        assert!(cells <= 20, "vertex enumeration limited to 20 cells");
        let k = m + n - 1;
        let mut out = Vec::new();
        for mask in 0u64..(1u64 << cells) {
            if mask.count_ones() as usize == k && is_spanning_tree(m, n, mask) {
                out.push(mask);
            }
        }
        out
    }

    fn is_spanning_tree(m: usize, n: usize, mask: u64) -> bool {
        // m+n−1 edges on m+n nodes: a tree iff connected.
        let mut parent: Vec<usize> = (0..m + n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        for cell in 0..m * n {
            if mask & (1 << cell) != 0 {
                let (a, b) = (find(&mut parent, cell / n), find(&mut parent, m + cell % n));
                if a == b {
                    return false;
                }
                parent[a] = b;
            }
        }
        true
    }

    /// Flows on the tree basis `mask` by leaf peeling; `None` if infeasible.
    fn basic_solution(m: usize, n: usize, mask: u64, supply: &[f64], demand: &[f64]) -> Option<Vec<f64>> {
        let mut rem: Vec<f64> = supply.iter().chain(demand).copied().collect();
        let mut edges: Vec<usize> = (0..m * n).filter(|c| mask & (1 << c) != 0).collect();
        let mut flow = vec![0.0; m * n];
        let mut degree = vec![0usize; m + n];
        for &c in &edges {
            degree[c / n] += 1;
            degree[m + c % n] += 1;
        }
        while !edges.is_empty() {
            let pos = edges.iter().position(|&c| degree[c / n] == 1 || degree[m + c % n] == 1)?;
            let c = edges.swap_remove(pos);
            let (r, col) = (c / n, m + c % n);
            let (leaf, other) = if degree[r] == 1 { (r, col) } else { (col, r) };
            let f = rem[leaf];
            if f < -1e-12 {
                return None;
            }
            flow[c] = f.max(0.0);
            rem[leaf] = 0.0;
            rem[other] -= f;
            degree[r] -= 1;
            degree[col] -= 1;
        }
        Some(flow)
    }

    /// Minimum transport cost over all vertices of the polytope.
    pub fn w1_by_vertex_enumeration(
        supply: &[f64],
        demand: &[f64],
        cost: impl Fn(usize, usize) -> f64,
        bases: &[u64],
    ) -> Result<f64, OtError> {
        let (m, n) = (supply.len(), demand.len());
        let mut best = f64::INFINITY;
        for &mask in bases {
            if let Some(flow) = basic_solution(m, n, mask, supply, demand) {
                let total: f64 = (0..m * n).map(|c| flow[c] * cost(c / n, c % n)).sum();
                best = best.min(total);
            }
        }
        if best.is_finite() {
            Ok(best)
        } else {
            Err(OtError::Internal("no feasible vertex".into()))
        }
    }
}

/// 1-D quantile coupling per coordinate: for product measures the optimal
/// coupling factorizes, and in 1-D it is the monotone (quantile) map, so
/// `W2² = Σ_k ∫₀¹ (F_a,k⁻¹(u) − F_b,k⁻¹(u))² du`. Integrated by the midpoint
/// rule on `grid` points. Independent of the closed form.
pub fn w2_quantile_grid(a: &DiagGaussian, b: &DiagGaussian, grid: usize) -> Result<f64, OtError> {
    use statrs::distribution::{ContinuousCDF, Normal};
    if a.dim() != b.dim() {
        return Err(OtError::DimMismatch(a.dim(), b.dim()));
    }
    let mut total = 0.0;
    for k in 0..a.dim() {
        let na = Normal::new(a.mu[k], a.sigma[k]).map_err(|e| OtError::Internal(e.to_string()))?;
        let nb = Normal::new(b.mu[k], b.sigma[k]).map_err(|e| OtError::Internal(e.to_string()))?;
        let mut acc = 0.0;
        for g in 0..grid {
            let u = (g as f64 + 0.5) / grid as f64;
            let diff = na.inverse_cdf(u) - nb.inverse_cdf(u);
            acc += diff * diff;
        }
        total += acc / grid as f64;
    }
    Ok(total.sqrt())
}

/// Empirical W2 from independent samples, sorted-matching per coordinate.
pub fn w2_empirical_samples<R: rand::Rng>(a: &DiagGaussian, b: &DiagGaussian, samples: usize, rng: &mut R) -> Result<f64, OtError> {
    use rand_distr::{Distribution, StandardNormal};
    if a.dim() != b.dim() {
        return Err(OtError::DimMismatch(a.dim(), b.dim()));
    }
    let mut total = 0.0;
    for k in 0..a.dim() {
        let mut xs: Vec<f64> = (0..samples).map(|_| a.mu[k] + a.sigma[k] * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
        let mut ys: Vec<f64> = (0..samples).map(|_| b.mu[k] + b.sigma[k] * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        total += xs.iter().zip(&ys).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / samples as f64;
    }
    Ok(total.sqrt())
}
