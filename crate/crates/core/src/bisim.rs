//! Ground truth on tabular MDPs: the c-weighted π-bisimulation metric
//!
//! `d(s_i, s_j) = (1−c)·|R^π_i − R^π_j| + c·W1(d)(P^π_i, P^π_j)`,
//!
//! exact policy values, and numerical checks of the value-difference bounds
//! the metric is supposed to provide.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ot::{self, DiscreteDistribution, OtError};

const ROW_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BisimError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no convergence after {iterations} iterations (last change {last_change:e})")]
    NoConvergence { iterations: usize, last_change: f64 },
    #[error("contraction violated at iteration {iteration}: change {change:e} > c × previous {previous:e}")]
    ContractionViolated { iteration: usize, change: f64, previous: f64 },
    #[error("singular linear system")]
    Singular,
    #[error(transparent)]
    Ot(#[from] OtError),
}

/// Explicit finite MDP. `p[s][a][s']` transition probabilities, `r[s][a]`
/// rewards in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    #[serde(rename = "P")]
    pub p: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
}

fn dirichlet_ones<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    // Dirichlet(1, …, 1) as normalized unit exponentials.
    let e: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|x| x / total).collect()
}

impl TabularMdp {
    pub fn validate(&self) -> Result<(), BisimError> {
        let bad = |m: String| Err(BisimError::InvalidMdp(m));
        if self.n_states == 0 || self.n_actions == 0 {
            return bad("empty state or action space".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if self.p.len() != self.n_states || self.r.len() != self.n_states {
            return bad("outer dimensions do not match n_states".into());
        }
        for s in 0..self.n_states {
            if self.p[s].len() != self.n_actions || self.r[s].len() != self.n_actions {
                return bad(format!("state {s}: action dimension mismatch"));
            }
            for a in 0..self.n_actions {
                let row = &self.p[s][a];
                if row.len() != self.n_states {
                    return bad(format!("P[{s}][{a}] has {} entries", row.len()));
                }
                if row.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                    return bad(format!("P[{s}][{a}] has a negative or non-finite entry"));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > ROW_TOL {
                    return bad(format!("P[{s}][{a}] sums to {total}"));
                }
                let r = self.r[s][a];
                if !(0.0..=1.0).contains(&r) {
                    return bad(format!("R[{s}][{a}] = {r} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Two absorbing states with one action: reward 1 in state 0, 0 in state 1.
    /// The discount-sensitivity bound is attained with equality here.
    pub fn absorbing_pair(gamma: f64) -> Self {
        Self {
            n_states: 2,
            n_actions: 1,
            gamma,
            p: vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]],
            r: vec![vec![1.0], vec![0.0]],
        }
    }

    /// Uniform rewards in [0, 1], Dirichlet(1) transition rows.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Self {
        let p = (0..n_states)
            .map(|_| (0..n_actions).map(|_| dirichlet_ones(n_states, rng)).collect())
            .collect();
        let r = (0..n_states).map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect()).collect();
        Self {
            n_states,
            n_actions,
            gamma,
            p,
            r,
        }
    }

    /// Like [`TabularMdp::random`], but each state can only reach a fixed set
    /// of at most `max_successors` states (shared by all actions), so every
    /// policy-aggregated row has small support.
    pub fn random_sparse<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        max_successors: usize,
        rng: &mut R,
    ) -> Self {
        let mut mdp = Self::random(n_states, n_actions, gamma, rng);
        for s in 0..n_states {
            let k = rng.random_range(1..=max_successors.min(n_states));
            let succ = rand::seq::index::sample(rng, n_states, k).into_vec();
            for a in 0..n_actions {
                let w = dirichlet_ones(k, rng);
                let mut row = vec![0.0; n_states];
                for (&t, &x) in succ.iter().zip(&w) {
                    row[t] = x;
                }
                mdp.p[s][a] = row;
            }
        }
        mdp
    }

    /// Same MDP with states relabeled: new state `perm[s]` is old state `s`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n_states;
        let mut p = vec![vec![vec![0.0; n]; self.n_actions]; n];
        let mut r = vec![vec![0.0; self.n_actions]; n];
        for s in 0..n {
            for a in 0..self.n_actions {
                r[perm[s]][a] = self.r[s][a];
                for t in 0..n {
                    p[perm[s]][a][perm[t]] = self.p[s][a][t];
                }
            }
        }
        Self {
            p,
            r,
            ..self.clone()
        }
    }
}

/// Stochastic policy `pi[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub pi: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            pi: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        Self {
            pi: actions
                .iter()
                .map(|&a| (0..n_actions).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        Self {
            pi: (0..n_states).map(|_| dirichlet_ones(n_actions, rng)).collect(),
        }
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut pi = self.pi.clone();
        for (s, row) in self.pi.iter().enumerate() {
            pi[perm[s]] = row.clone();
        }
        Self { pi }
    }

    fn validate(&self, mdp: &TabularMdp) -> Result<(), BisimError> {
        if self.pi.len() != mdp.n_states {
            return Err(BisimError::InvalidPolicy(format!("{} rows for {} states", self.pi.len(), mdp.n_states)));
        }
        for (s, row) in self.pi.iter().enumerate() {
            if row.len() != mdp.n_actions || row.iter().any(|&x| !(x >= 0.0)) {
                return Err(BisimError::InvalidPolicy(format!("row {s} malformed")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_TOL {
                return Err(BisimError::InvalidPolicy(format!("row {s} sums to {total}")));
            }
        }
        Ok(())
    }
}

/// Policy-aggregated reward vector and transition matrix (row-major `n×n`).
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub n: usize,
    pub r: Vec<f64>,
    pub p: Vec<f64>,
}

impl Aggregated {
    pub fn row(&self, s: usize) -> &[f64] {
        &self.p[s * self.n..(s + 1) * self.n]
    }
}

/// `R^π_s = Σ_a π(a|s) R(s,a)`, `P^π_s = Σ_a π(a|s) P(·|s,a)`.
pub fn policy_aggregate(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Aggregated, BisimError> {
    mdp.validate()?;
    pi.validate(mdp)?;
    let n = mdp.n_states;
    let mut r = vec![0.0; n];
    let mut p = vec![0.0; n * n];
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let w = pi.pi[s][a];
            r[s] += w * mdp.r[s][a];
            for t in 0..n {
                p[s * n + t] += w * mdp.p[s][a][t];
            }
        }
        // Renormalize away roundoff so rows pass the OT mass check.
        let total: f64 = p[s * n..(s + 1) * n].iter().sum();
        p[s * n..(s + 1) * n].iter_mut().for_each(|x| *x /= total);
    }
    Ok(Aggregated { n, r, p })
}

/// Symmetric, nonnegative state-pair distances with zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoMetric {
    pub n: usize,
    pub d: Vec<f64>,
}

impl PseudoMetric {
    pub fn zeros(n: usize) -> Self {
        Self { n, d: vec![0.0; n * n] }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    fn set_pair(&mut self, i: usize, j: usize, v: f64) {
        self.d[i * self.n + j] = v;
        self.d[j * self.n + i] = v;
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.d.iter().zip(&other.d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_pseudometric(&self) -> bool {
        (0..self.n).all(|i| {
            self.get(i, i) == 0.0 && (0..self.n).all(|j| self.get(i, j) >= 0.0 && self.get(i, j) == self.get(j, i))
        })
    }

    /// Largest `d(i,k) − d(i,j) − d(j,k)` over all triples (≤ 0 for a metric).
    pub fn max_triangle_violation(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.n {
            for j in 0..self.n {
                for k in 0..self.n {
                    worst = worst.max(self.get(i, k) - self.get(i, j) - self.get(j, k));
                }
            }
        }
        worst
    }
}

/// Converged metric plus convergence diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct FixedPoint {
    pub metric: PseudoMetric,
    pub iterations: usize,
    /// Iterations sufficient for convergence by the c-contraction argument.
    pub contraction_bound: usize,
    /// Largest observed `‖d_{k+1} − d_k‖∞ / ‖d_k − d_{k−1}‖∞`.
    pub max_contraction_ratio: f64,
    pub final_change: f64,
}

pub fn iteration_cap(c: f64, tol: f64) -> usize {
    ((tol.ln() / c.ln()).ceil().max(0.0) as usize) + 16
}

/// Starting from `d_0 = 0`, `‖d_k − d_{k−1}‖∞ ≤ (1−c)·c^{k−1}` (rewards in
/// [0,1]), so `floor(ln(tol/(1−c))/ln c) + 2` updates suffice to see a change
/// below `tol`.
pub fn contraction_bound(c: f64, tol: f64) -> usize {
    let k = (tol / (1.0 - c)).ln() / c.ln();
    (k.floor().max(-1.0) as i64 + 2).max(1) as usize
}

fn check_c(c: f64) -> Result<(), BisimError> {
    if c > 0.0 && c < 1.0 {
        Ok(())
    } else {
        Err(BisimError::InvalidParameter(format!("c = {c} outside (0, 1)")))
    }
}

fn apply_operator(agg: &Aggregated, rows: &[DiscreteDistribution], c: f64, d: &PseudoMetric) -> Result<PseudoMetric, BisimError> {
    let n = agg.n;
    let mut next = PseudoMetric::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            let w1 = if agg.row(i) == agg.row(j) {
                0.0
            } else {
                ot::w1_discrete(&rows[i], &rows[j], &d.d)?
            };
            next.set_pair(i, j, (1.0 - c) * (agg.r[i] - agg.r[j]).abs() + c * w1);
        }
    }
    Ok(next)
}

/// One application of the operator `F(d)`.
pub fn bisim_operator(mdp: &TabularMdp, pi: &TabularPolicy, c: f64, d: &PseudoMetric) -> Result<PseudoMetric, BisimError> {
    check_c(c)?;
    let agg = policy_aggregate(mdp, pi)?;
    if d.n != agg.n {
        return Err(BisimError::InvalidParameter(format!("metric over {} states, MDP has {}", d.n, agg.n)));
    }
    let rows: Vec<DiscreteDistribution> = (0..agg.n)
        .map(|s| DiscreteDistribution::new(agg.row(s).to_vec()))
        .collect::<Result<_, _>>()?;
    apply_operator(&agg, &rows, c, d)
}

/// Least fixed point of the c-weighted π-bisimulation operator.
pub fn bisim_fixed_point(mdp: &TabularMdp, pi: &TabularPolicy, c: f64, tol: f64) -> Result<FixedPoint, BisimError> {
    check_c(c)?;
    if !(tol > 0.0) {
        return Err(BisimError::InvalidParameter(format!("tol = {tol} must be positive")));
    }
    let agg = policy_aggregate(mdp, pi)?;
    let n = agg.n;
    let rows: Vec<DiscreteDistribution> = (0..n)
        .map(|s| DiscreteDistribution::new(agg.row(s).to_vec()))
        .collect::<Result<_, _>>()?;
    let cap = iteration_cap(c, tol);
    let mut d = PseudoMetric::zeros(n);
    let mut prev_change = f64::INFINITY;
    let mut max_ratio: f64 = 0.0;
    for iteration in 1..=cap {
        let next = apply_operator(&agg, &rows, c, &d)?;
        let change = next.max_abs_diff(&d);
        if prev_change.is_finite() {
            if change > c * prev_change + 1e-12 {
                return Err(BisimError::ContractionViolated {
                    iteration,
                    change,
                    previous: prev_change,
                });
            }
            if prev_change > 0.0 {
                max_ratio = max_ratio.max(change / prev_change);
            }
        }
        d = next;
        if change < tol {
            return Ok(FixedPoint {
                metric: d,
                iterations: iteration,
                contraction_bound: contraction_bound(c, tol),
                max_contraction_ratio: max_ratio,
                final_change: change,
            });
        }
        prev_change = change;
    }
    Err(BisimError::NoConvergence {
        iterations: cap,
        last_change: prev_change,
    })
}

/// Solves `(I − γP^π) V = R^π`.
pub fn exact_value(mdp: &TabularMdp, pi: &TabularPolicy, gamma: f64) -> Result<Vec<f64>, BisimError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(BisimError::InvalidParameter(format!("gamma = {gamma} outside [0, 1)")));
    }
    let agg = policy_aggregate(mdp, pi)?;
    let n = agg.n;
    let mut a: Vec<f64> = (0..n * n)
        .map(|k| if k / n == k % n { 1.0 } else { 0.0 } - gamma * agg.p[k])
        .collect();
    solve(n, &mut a, agg.r.clone())
}

/// Gaussian elimination with partial pivoting on a dense `n×n` system.
fn solve(n: usize, a: &mut [f64], mut b: Vec<f64>) -> Result<Vec<f64>, BisimError> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
            .expect("nonempty");
        if a[pivot * n + col].abs() < 1e-14 {
            return Err(BisimError::Singular);
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
            }
            b.swap(pivot, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    Ok(x)
}

#[derive(Debug, Clone, Serialize)]
pub struct PairSlack {
    pub i: usize,
    pub j: usize,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueBoundReport {
    pub c: f64,
    pub gamma: f64,
    pub correction: f64,
    /// max over pairs of `lhs − rhs`; ≤ 0 when the bound holds.
    pub max_violation: f64,
    pub pairs: Vec<PairSlack>,
    pub iterations: usize,
}

/// `(1−c)|V(s_i) − V(s_j)| ≤ d*(s_i,s_j) + 2(1−c)(γ − min(c,γ)) / ((1−γ)(1−c))`.
pub fn check_value_bound(mdp: &TabularMdp, pi: &TabularPolicy, c: f64, gamma: f64, tol: f64) -> Result<ValueBoundReport, BisimError> {
    check_c(c)?;
    let fp = bisim_fixed_point(mdp, pi, c, tol)?;
    let v = exact_value(mdp, pi, gamma)?;
    let correction = 2.0 * (1.0 - c) * (gamma - c.min(gamma)) / ((1.0 - gamma) * (1.0 - c));
    let n = mdp.n_states;
    let mut pairs = Vec::new();
    let mut max_violation = f64::NEG_INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            let lhs = (1.0 - c) * (v[i] - v[j]).abs();
            let rhs = fp.metric.get(i, j) + correction;
            max_violation = max_violation.max(lhs - rhs);
            pairs.push(PairSlack { i, j, lhs, rhs });
        }
    }
    if pairs.is_empty() {
        max_violation = -correction;
    }
    Ok(ValueBoundReport {
        c,
        gamma,
        correction,
        max_violation,
        pairs,
        iterations: fp.iterations,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DiscountBoundReport {
    pub gamma1: f64,
    pub gamma2: f64,
    pub bound: f64,
    pub max_lhs: f64,
    /// `max_lhs − bound`; ≤ 0 when the bound holds.
    pub max_violation: f64,
}

/// `|V_{γ1}(s) − V_{γ2}(s)| ≤ (γ2 − γ1) / ((1−γ1)(1−γ2))`.
pub fn check_discount_bound(mdp: &TabularMdp, pi: &TabularPolicy, gamma1: f64, gamma2: f64) -> Result<DiscountBoundReport, BisimError> {
    if !(0.0 <= gamma1 && gamma1 <= gamma2 && gamma2 < 1.0) {
        return Err(BisimError::InvalidParameter(format!("need 0 ≤ γ1 ≤ γ2 < 1, got {gamma1}, {gamma2}")));
    }
    let v1 = exact_value(mdp, pi, gamma1)?;
    let v2 = exact_value(mdp, pi, gamma2)?;
    let bound = (gamma2 - gamma1) / ((1.0 - gamma1) * (1.0 - gamma2));
    let max_lhs = v1.iter().zip(&v2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(DiscountBoundReport {
        gamma1,
        gamma2,
        bound,
        max_lhs,
        max_violation: max_lhs - bound,
    })
}

/// One ordered state pair with exact similarity targets.
#[derive(Debug, Clone, Serialize)]
pub struct SupervisionRecord {
    pub i: usize,
    pub j: usize,
    pub obs_i: Vec<f64>,
    pub obs_j: Vec<f64>,
    pub target_r: f64,
    pub target_d: f64,
    pub target_total: f64,
}

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
}

/// Exact targets for every ordered pair: `|R^π_i − R^π_j|`,
/// `W1(d*)(P^π_i, P^π_j)` and their `(1−c, c)` combination.
pub fn emit_supervision(mdp: &TabularMdp, pi: &TabularPolicy, c: f64, d_star: &PseudoMetric) -> Result<Vec<SupervisionRecord>, BisimError> {
    check_c(c)?;
    let agg = policy_aggregate(mdp, pi)?;
    let n = agg.n;
    let rows: Vec<DiscreteDistribution> = (0..n)
        .map(|s| DiscreteDistribution::new(agg.row(s).to_vec()))
        .collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let target_r = (agg.r[i] - agg.r[j]).abs();
            let target_d = if i == j { 0.0 } else { ot::w1_discrete(&rows[i], &rows[j], &d_star.d)? };
            out.push(SupervisionRecord {
                i,
                j,
                obs_i: one_hot(n, i),
                obs_j: one_hot(n, j),
                target_r,
                target_d,
                target_total: (1.0 - c) * target_r + c * target_d,
            });
        }
    }
    Ok(out)
}

/// Deliberately naive reference implementation for cross-checking
/// [`bisim_fixed_point`]: full-matrix Jacobi sweeps, every pair solved by
/// exhaustive vertex enumeration of its transport polytope.
pub mod reference {
    use super::*;
    use crate::ot::reference::{spanning_tree_bases, w1_by_vertex_enumeration};

    pub fn fixed_point_brute_force(mdp: &TabularMdp, pi: &TabularPolicy, c: f64, tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize), BisimError> {
        let agg = policy_aggregate(mdp, pi)?;
        let n = agg.n;
        let supports: Vec<Vec<usize>> = (0..n).map(|s| (0..n).filter(|&t| agg.row(s)[t] > 0.0).collect()).collect();
        let mut bases: HashMap<(usize, usize), Vec<u64>> = HashMap::new();
        let mut d = vec![0.0; n * n];
        for it in 1..=max_iter {
            let mut next = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    let (si, sj) = (&supports[i], &supports[j]);
                    let b = bases
                        .entry((si.len(), sj.len()))
                        .or_insert_with(|| spanning_tree_bases(si.len(), sj.len()));
                    let supply: Vec<f64> = si.iter().map(|&t| agg.row(i)[t]).collect();
                    let demand: Vec<f64> = sj.iter().map(|&t| agg.row(j)[t]).collect();
                    let w1 = w1_by_vertex_enumeration(&supply, &demand, |a, b| d[si[a] * n + sj[b]], b)?;
                    next[i * n + j] = (1.0 - c) * (agg.r[i] - agg.r[j]).abs() + c * w1;
                }
            }
            let change = next.iter().zip(&d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            d = next;
            if change < tol {
                return Ok((d, it));
            }
        }
        Err(BisimError::NoConvergence {
            iterations: max_iter,
            last_change: f64::NAN,
        })
    }
}
