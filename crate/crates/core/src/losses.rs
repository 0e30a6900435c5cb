//! Training objectives. Each loss builds its own graph in which every
//! parameter outside the loss's update set is frozen, so the stop-gradient
//! structure is explicit and checkable.

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{sample_crop_params, CropParams};
use crate::diffcore::{DiffError, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::nets::{pixels_to_tensor, BranchWeights, Encoded, Networks};
use crate::ot::{w2_diag_gaussian, DiagGaussian, OtError};
use crate::replay::PairBatch;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error("batch is malformed: {0}")]
    Batch(String),
}

/// How the reward/dynamics branches are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `[c, 1 − c] = softmax(η_c)`, learned through the Q loss.
    Adaptive,
    /// Constant `c`.
    Fixed(f64),
    /// Reward weight 1, dynamics weight γ.
    OneGamma,
}

/// Sign of the entropy term inside the bootstrapped value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    /// `min Q̄ − α log π` (soft value).
    Standard,
    /// `min Q̄ + α log π`, as some write-ups print it.
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub gamma: f64,
    pub weights: WeightMode,
    pub entropy_sign: EntropySign,
    pub target_entropy: f64,
}

/// One minibatch, augmented and converted to tensors.
///
/// Index `l` of the two-element arrays is the crop draw `(l+1)`. The `j` side
/// of each pair is the row permutation `perm` of the `i` side, including its
/// crops, so every `j` row carries its own independent crop draw.
#[derive(Debug, Clone)]
pub struct LossInputs<T: Real> {
    pub obs: [Tensor<T>; 2],
    pub next_obs: [Tensor<T>; 2],
    pub actions: Tensor<T>,
    pub rewards: Tensor<T>,
    pub not_done: Tensor<T>,
    pub perm: Vec<usize>,
    pub target_noise: [Tensor<T>; 2],
    pub actor_noise: Tensor<T>,
}

impl<T: Real> LossInputs<T> {
    pub fn batch_size(&self) -> usize {
        self.perm.len()
    }

    pub fn cast<U: Real>(&self) -> LossInputs<U> {
        LossInputs {
            obs: [self.obs[0].cast(), self.obs[1].cast()],
            next_obs: [self.next_obs[0].cast(), self.next_obs[1].cast()],
            actions: self.actions.cast(),
            rewards: self.rewards.cast(),
            not_done: self.not_done.cast(),
            perm: self.perm.clone(),
            target_noise: [self.target_noise[0].cast(), self.target_noise[1].cast()],
            actor_noise: self.actor_noise.cast(),
        }
    }
}

fn gaussian_noise<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(StandardNormal.sample(rng))).collect();
    Tensor::new(shape, data).expect("noise shape")
}

/// Draws crops (pad 0 disables augmentation) and Gaussian noise for a batch.
pub fn prepare_inputs<T: Real, R: Rng + ?Sized>(batch: &PairBatch<'_>, shape: [usize; 3], pad: usize, action_dim: usize, rng: &mut R) -> Result<LossInputs<T>, LossError> {
    let n = batch.i.len();
    if n == 0 || batch.perm.len() != n {
        return Err(LossError::Batch("empty batch or permutation length mismatch".into()));
    }
    let obs: Vec<&[u8]> = batch.i.iter().map(|t| t.obs.data.as_slice()).collect();
    let next: Vec<&[u8]> = batch.i.iter().map(|t| t.next_obs.data.as_slice()).collect();
    let mut crops = || -> Vec<CropParams> { (0..n).map(|_| sample_crop_params(rng, pad)).collect() };
    let (c1, c2, n1, n2) = (crops(), crops(), crops(), crops());
    let tensor = |o: &[&[u8]], c: &[CropParams]| pixels_to_tensor::<T>(o, shape, Some((c, pad)));
    let mut actions = Vec::with_capacity(n * action_dim);
    for t in &batch.i {
        if t.action.len() != action_dim {
            return Err(LossError::Batch(format!("action of length {} (expected {action_dim})", t.action.len())));
        }
        actions.extend(t.action.iter().map(|&a| T::of(a as f64)));
    }
    let column = |f: &dyn Fn(&crate::replay::Transition) -> f64| Tensor::new(&[n, 1], batch.i.iter().map(|t| T::of(f(t))).collect());
    Ok(LossInputs {
        obs: [tensor(&obs, &c1)?, tensor(&obs, &c2)?],
        next_obs: [tensor(&next, &n1)?, tensor(&next, &n2)?],
        actions: Tensor::new(&[n, action_dim], actions)?,
        rewards: column(&|t| t.reward as f64)?,
        not_done: column(&|t| if t.done { 0.0 } else { 1.0 })?,
        perm: batch.perm.clone(),
        target_noise: [gaussian_noise(rng, &[n, action_dim]), gaussian_noise(rng, &[n, action_dim])],
        actor_noise: gaussian_noise(rng, &[n, action_dim]),
    })
}

/// A built loss: its graph, the scalar node, and diagnostics.
pub struct Built<T: Real> {
    pub graph: Graph<T>,
    pub loss: Var,
    pub stats: LossStats<T>,
}

impl<T: Real> Built<T> {
    pub fn value(&self) -> f64 {
        self.graph.value(self.loss).item().as_f64()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LossStats<T: Real> {
    /// Value of `c` used by the loss (dynamics-branch weight).
    pub c: Option<f64>,
    /// Mean reward-regression term over the two crop views.
    pub reward_term: Option<f64>,
    /// Mean dynamics-regression term over the two crop views.
    pub dynamics_term: Option<f64>,
    /// Mean `‖φ_r‖₁ / |Z_r|` and `‖φ_d‖₁ / |Z_d|` over the batch.
    pub norm_r: Option<f64>,
    pub norm_d: Option<f64>,
    /// Per-sample `log π(a|s)` of the actor's sample (actor loss only).
    pub log_prob: Option<Tensor<T>>,
}

/// Parameter sets each loss is allowed to update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Repr,
    Q,
    Actor,
    Alpha,
    Dynamics,
    L1Baseline,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [LossKind::Repr, LossKind::Q, LossKind::Actor, LossKind::Alpha, LossKind::Dynamics, LossKind::L1Baseline];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Repr => "repr_loss",
            LossKind::Q => "q_loss",
            LossKind::Actor => "actor_loss",
            LossKind::Alpha => "alpha_loss",
            LossKind::Dynamics => "dynamics_loss",
            LossKind::L1Baseline => "l1_baseline_loss",
        }
    }

    pub fn update_set(self, nets: &Networks, weights: WeightMode) -> Vec<ParamId> {
        match self {
            LossKind::Repr => {
                let mut ids = nets.encoder_ids(false);
                ids.extend(nets.meta_ids());
                ids
            }
            LossKind::Q => {
                let mut ids = nets.critic_ids(false);
                ids.extend(nets.encoder_ids(false));
                if weights == WeightMode::Adaptive {
                    ids.push(nets.eta_c);
                }
                ids
            }
            LossKind::Actor => nets.actor_ids(),
            LossKind::Alpha => vec![nets.log_alpha],
            LossKind::Dynamics => nets.dynamics_ids(),
            LossKind::L1Baseline => nets.encoder_ids(false),
        }
    }
}

fn graph_for<T: Real>(store: &ParamStore<T>, allowed: &[ParamId]) -> Graph<T> {
    let allowed: HashSet<ParamId> = allowed.iter().copied().collect();
    let mut g = Graph::new();
    g.freeze(store.ids().filter(|id| !allowed.contains(id)));
    g
}

/// Branch weights as graph nodes: learned `(1 − c, c)` in adaptive mode
/// (optionally detached), constants otherwise.
pub fn branch_weights<T: Real>(g: &mut Graph<T>, nets: &Networks, store: &ParamStore<T>, target: bool, mode: WeightMode, gamma: f64, detach: bool) -> Result<(BranchWeights, f64), DiffError> {
    let constant = |g: &mut Graph<T>, r: f64, d: f64| BranchWeights {
        reward: g.constant(Tensor::full(&[1], T::of(r))),
        dynamics: g.constant(Tensor::full(&[1], T::of(d))),
    };
    Ok(match mode {
        WeightMode::Adaptive => {
            let (c, one_minus) = nets.adaptive_weight(g, store, target)?;
            let value = g.value(c).item().as_f64();
            let w = BranchWeights { reward: one_minus, dynamics: c };
            if detach {
                (
                    BranchWeights {
                        reward: g.stop_gradient(w.reward),
                        dynamics: g.stop_gradient(w.dynamics),
                    },
                    value,
                )
            } else {
                (w, value)
            }
        }
        WeightMode::Fixed(c) => (constant(g, 1.0 - c, c), c),
        WeightMode::OneGamma => (constant(g, 1.0, gamma), gamma),
    })
}

/// Squared residual written as `|e|²` (identical value and gradient to `e²`).
fn squared_residual<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var, DiffError> {
    let e = g.sub(pred, target)?;
    let a = g.abs(e)?;
    g.square(a)
}

fn mean_of<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    let t = g.value(v);
    t.data().iter().map(|x| x.as_f64()).sum::<f64>() / t.numel() as f64
}

fn mean_abs_per_dim<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    let t = g.value(v);
    t.data().iter().map(|x| x.as_f64().abs()).sum::<f64>() / t.numel() as f64
}

/// Bootstrapped target `y = r + (1 − done)·γ·½ Σ_l [min_k Q̄_k(s′⁽ˡ⁾, a′⁽ˡ⁾) ∓ α log π(a′⁽ˡ⁾|s′⁽ˡ⁾)]`,
/// fully detached.
pub fn target_value<T: Real>(nets: &Networks, store: &ParamStore<T>, inp: &LossInputs<T>, alpha: f64, s: &LossSettings) -> Result<Tensor<T>, LossError> {
    let mut g = Graph::no_grad();
    let (w, _) = branch_weights(&mut g, nets, store, true, s.weights, s.gamma, true)?;
    let sign = match s.entropy_sign {
        EntropySign::Standard => -1.0,
        EntropySign::Printed => 1.0,
    };
    let mut values = Vec::new();
    for l in 0..2 {
        let next = g.constant(inp.next_obs[l].clone());
        let enc_t = nets.encode(&mut g, store, next, true)?;
        let features = nets.actor_features(&mut g, store, next)?;
        let (mean, log_std) = nets.actor_forward(&mut g, store, features)?;
        let noise = g.constant(inp.target_noise[l].clone());
        let (a_next, log_prob) = nets.actor_sample(&mut g, mean, log_std, noise)?;
        let input = nets.critic_input(&mut g, &enc_t, &w, a_next)?;
        let (q1, q2) = nets.critic_eval(&mut g, store, input, true)?;
        let q = g.min(q1, q2)?;
        let ent = g.scale(log_prob, sign * alpha)?;
        values.push(g.add(q, ent)?);
    }
    let v = g.add(values[0], values[1])?;
    let v = g.scale(v, 0.5 * s.gamma)?;
    let not_done = g.constant(inp.not_done.clone());
    let v = g.mul(v, not_done)?;
    let r = g.constant(inp.rewards.clone());
    let y = g.add(r, v)?;
    Ok(g.value(y).clone())
}

/// `mean_b Σ_k ½[(Q_k(s⁽¹⁾,a) − y)² + (Q_k(s⁽²⁾,a) − y)²]`; trains critics,
/// encoders and (adaptive mode) η_c.
pub fn q_loss<T: Real>(nets: &Networks, store: &ParamStore<T>, inp: &LossInputs<T>, y: &Tensor<T>, s: &LossSettings) -> Result<Built<T>, LossError> {
    let mut g = graph_for(store, &LossKind::Q.update_set(nets, s.weights));
    let (w, c) = branch_weights(&mut g, nets, store, false, s.weights, s.gamma, false)?;
    let y = g.constant(y.clone());
    let a = g.constant(inp.actions.clone());
    let mut total: Option<Var> = None;
    for l in 0..2 {
        let obs = g.constant(inp.obs[l].clone());
        let enc = nets.encode(&mut g, store, obs, false)?;
        let input = nets.critic_input(&mut g, &enc, &w, a)?;
        let (q1, q2) = nets.critic_eval(&mut g, store, input, false)?;
        for q in [q1, q2] {
            let e = g.sub(q, y)?;
            let sq = g.square(e)?;
            total = Some(match total {
                Some(t) => g.add(t, sq)?,
                None => sq,
            });
        }
    }
    let half = g.scale(total.expect("four terms"), 0.5)?;
    let loss = g.mean(half)?;
    Ok(Built {
        graph: g,
        loss,
        stats: LossStats {
            c: Some(c),
            ..Default::default()
        },
    })
}

/// `mean_b[α log π(a|s⁽¹⁾) − min_k Q_k(s⁽¹⁾, a)]` with a reparameterized `a`;
/// trains only the actor.
pub fn actor_loss<T: Real>(nets: &Networks, store: &ParamStore<T>, inp: &LossInputs<T>, alpha: f64, s: &LossSettings) -> Result<Built<T>, LossError> {
    let mut g = graph_for(store, &LossKind::Actor.update_set(nets, s.weights));
    let (w, c) = branch_weights(&mut g, nets, store, false, s.weights, s.gamma, true)?;
    let obs = g.constant(inp.obs[0].clone());
    let enc = nets.encode(&mut g, store, obs, false)?;
    let features = nets.actor_input(&mut g, &enc)?;
    let (mean, log_std) = nets.actor_forward(&mut g, store, features)?;
    let noise = g.constant(inp.actor_noise.clone());
    let (action, log_prob) = nets.actor_sample(&mut g, mean, log_std, noise)?;
    let enc = Encoded {
        conv: enc.conv,
        z_r: g.stop_gradient(enc.z_r),
        z_d: g.stop_gradient(enc.z_d),
    };
    let input = nets.critic_input(&mut g, &enc, &w, action)?;
    let (q1, q2) = nets.critic_eval(&mut g, store, input, false)?;
    let q = g.min(q1, q2)?;
    let ent = g.scale(log_prob, alpha)?;
    let diff = g.sub(ent, q)?;
    let loss = g.mean(diff)?;
    let log_prob = g.value(log_prob).clone();
    Ok(Built {
        graph: g,
        loss,
        stats: LossStats {
            c: Some(c),
            log_prob: Some(log_prob),
            ..Default::default()
        },
    })
}

/// `mean_b[α·(−log π − H̄)]` with `α = exp(log α)`; `log π` is data here.
pub fn alpha_loss<T: Real>(nets: &Networks, store: &ParamStore<T>, log_prob: &Tensor<T>, target_entropy: f64) -> Result<Built<T>, LossError> {
    let mut g = graph_for(store, &[nets.log_alpha]);
    let log_alpha = g.param(store, nets.log_alpha);
    let alpha = g.exp(log_alpha)?;
    let lp = g.constant(log_prob.clone());
    let gap = g.scale(lp, -1.0)?;
    let gap = g.add_scalar(gap, -target_entropy)?;
    let weighted = g.mul(gap, alpha)?;
    let loss = g.mean(weighted)?;
    Ok(Built {
        graph: g,
        loss,
        stats: LossStats::default(),
    })
}

/// Detached regression targets for each `(i, j)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTargets {
    /// `W₂(P̂(·|φ_d(s_i⁽¹⁾), a_i), P̂(·|φ_d(s_j⁽¹⁾), a_j))`.
    pub w2: Vec<f64>,
    /// `|r_i − r_j|`.
    pub reward_gap: Vec<f64>,
}

/// Computes [`PairTargets`] with the current parameters, outside any
/// gradient path.
pub fn pair_targets<T: Real>(nets: &Networks, store: &ParamStore<T>, inp: &LossInputs<T>) -> Result<PairTargets, LossError> {
    let mut g = Graph::no_grad();
    let obs = g.constant(inp.obs[0].clone());
    let z = nets.encode(&mut g, store, obs, false)?.z_d;
    let a = g.constant(inp.actions.clone());
    let (mu, sigma) = nets.dynamics_predict(&mut g, store, z, a)?;
    let dim = *g.shape(mu).last().expect("rank 2");
    let rows = |v: &Tensor<T>| -> Vec<Vec<f64>> { v.data().chunks(dim).map(|r| r.iter().map(|x| x.as_f64()).collect()).collect() };
    let (mu, sigma) = (rows(g.value(mu)), rows(g.value(sigma)));
    let gaussians: Vec<DiagGaussian> = mu.into_iter().zip(sigma).map(|(m, s)| DiagGaussian::new(m, s)).collect::<Result<_, _>>()?;
    let r = inp.rewards.data();
    let mut w2 = Vec::with_capacity(inp.perm.len());
    let mut reward_gap = Vec::with_capacity(inp.perm.len());
    for (b, &p) in inp.perm.iter().enumerate() {
        w2.push(w2_diag_gaussian(&gaussians[b], &gaussians[p])?);
        reward_gap.push((r[b].as_f64() - r[p].as_f64()).abs());
    }
    Ok(PairTargets { w2, reward_gap })
}

fn column<T: Real>(g: &mut Graph<T>, v: &[f64]) -> Var {
    g.constant(Tensor::new(&[v.len(), 1], v.iter().map(|&x| T::of(x)).collect()).expect("column"))
}

/// Similarity regression with crop views (1) in order (i, j) and (2) in
/// order (j, i); the dynamics target always uses the crop-(1) predictions.
/// `c` and the dynamics model are detached. Trains encoders and meta-learners.
pub fn repr_loss<T: Real>(nets: &Networks, store: &ParamStore<T>, inp: &LossInputs<T>, targets: &PairTargets, s: &LossSettings) -> Result<Built<T>, LossError> {
    let mut g = graph_for(store, &LossKind::Repr.update_set(nets, s.weights));
    let (w, c) = branch_weights(&mut g, nets, store, false, s.weights, s.gamma, true)?;
    let obs1 = g.constant(inp.obs[0].clone());
    let obs2 = g.constant(inp.obs[1].clone());
    let enc1 = nets.encode(&mut g, store, obs1, false)?;
    let enc2 = nets.encode(&mut g, store, obs2, false)?;
    let (w2, dr) = (&targets.w2, &targets.reward_gap);
    let perm = &inp.perm;
    let stats_norms = (mean_abs_per_dim(&g, enc1.z_r), mean_abs_per_dim(&g, enc1.z_d));

    if nets.variant.single_embedding {
        let total: Vec<f64> = dr.iter().zip(w2).map(|(r, d)| r + d).collect();
        let target = column(&mut g, &total);
        let zj1 = g.gather_rows(enc1.z_r, perm)?;
        let zj2 = g.gather_rows(enc2.z_r, perm)?;
        let f1 = nets.meta_similarity(&mut g, store, false, enc1.z_r, zj1)?;
        let f2 = nets.meta_similarity(&mut g, store, false, zj2, enc2.z_r)?;
        let t1 = squared_residual(&mut g, f1, target)?;
        let t3 = squared_residual(&mut g, f2, target)?;
        let sum = g.add(t1, t3)?;
        let loss = g.mean(sum)?;
        let term = 0.5 * (mean_of(&g, t1) + mean_of(&g, t3));
        return Ok(Built {
            graph: g,
            loss,
            stats: LossStats {
                c: None,
                reward_term: Some(term),
                dynamics_term: Some(term),
                norm_r: Some(stats_norms.0),
                norm_d: Some(stats_norms.1),
                log_prob: None,
            },
        });
    }

    let dr_v = column(&mut g, dr);
    let w2_v = column(&mut g, w2);
    let zr_j1 = g.gather_rows(enc1.z_r, perm)?;
    let zd_j1 = g.gather_rows(enc1.z_d, perm)?;
    let zr_j2 = g.gather_rows(enc2.z_r, perm)?;
    let zd_j2 = g.gather_rows(enc2.z_d, perm)?;
    let fr1 = nets.meta_similarity(&mut g, store, false, enc1.z_r, zr_j1)?;
    let fd1 = nets.meta_similarity(&mut g, store, true, enc1.z_d, zd_j1)?;
    let fr2 = nets.meta_similarity(&mut g, store, false, zr_j2, enc2.z_r)?;
    let fd2 = nets.meta_similarity(&mut g, store, true, zd_j2, enc2.z_d)?;
    let t1 = squared_residual(&mut g, fr1, dr_v)?;
    let t2 = squared_residual(&mut g, fd1, w2_v)?;
    let t3 = squared_residual(&mut g, fr2, dr_v)?;
    let t4 = squared_residual(&mut g, fd2, w2_v)?;
    let reward = g.add(t1, t3)?;
    let reward = g.mul(reward, w.reward)?;
    let dynamics = g.add(t2, t4)?;
    let dynamics = g.mul(dynamics, w.dynamics)?;
    let sum = g.add(reward, dynamics)?;
    let loss = g.mean(sum)?;
    let stats = LossStats {
        c: Some(c),
        reward_term: Some(0.5 * (mean_of(&g, t1) + mean_of(&g, t3))),
        dynamics_term: Some(0.5 * (mean_of(&g, t2) + mean_of(&g, t4))),
        norm_r: Some(stats_norms.0),
        norm_d: Some(stats_norms.1),
        log_prob: None,
    };
    Ok(Built { graph: g, loss, stats })
}

/// Fixed-form baseline: `mean_b(‖φ(s_i⁽¹⁾) − φ(s_j⁽¹⁾)‖₁ − |r_i − r_j| − γ·W₂)²`
/// on the combined embedding `φ = [φ_r : φ_d]`. Trains encoders only.
pub fn l1_baseline_loss<T: Real>(nets: &Networks, store: &ParamStore<T>, inp: &LossInputs<T>, targets: &PairTargets, s: &LossSettings) -> Result<Built<T>, LossError> {
    let mut g = graph_for(store, &LossKind::L1Baseline.update_set(nets, s.weights));
    let obs1 = g.constant(inp.obs[0].clone());
    let enc1 = nets.encode(&mut g, store, obs1, false)?;
    let target: Vec<f64> = targets.reward_gap.iter().zip(&targets.w2).map(|(r, d)| r + s.gamma * d).collect();
    let target = column(&mut g, &target);
    let phi = if nets.variant.single_embedding { enc1.z_r } else { g.concat(&[enc1.z_r, enc1.z_d], 1)? };
    let phi_j = g.gather_rows(phi, &inp.perm)?;
    let diff = g.sub(phi, phi_j)?;
    let abs = g.abs(diff)?;
    let dist = g.sum_last(abs)?;
    let e = g.sub(dist, target)?;
    let t = g.square(e)?;
    let loss = g.mean(t)?;
    let term = mean_of(&g, t);
    let norms = (mean_abs_per_dim(&g, enc1.z_r), mean_abs_per_dim(&g, enc1.z_d));
    Ok(Built {
        graph: g,
        loss,
        stats: LossStats {
            reward_term: Some(term),
            dynamics_term: Some(term),
            norm_r: Some(norms.0),
            norm_d: Some(norms.1),
            ..Default::default()
        },
    })
}

/// `mean_{b,k}[((φ_d(s′⁽¹⁾) − μ) / (2σ))²]` with `(μ, σ) = P̂(·|φ_d(s⁽¹⁾), a)`;
/// encoders are frozen, so only the dynamics model trains.
pub fn dynamics_loss<T: Real>(nets: &Networks, store: &ParamStore<T>, inp: &LossInputs<T>, s: &LossSettings) -> Result<Built<T>, LossError> {
    let mut g = graph_for(store, &LossKind::Dynamics.update_set(nets, s.weights));
    let obs = g.constant(inp.obs[0].clone());
    let next = g.constant(inp.next_obs[0].clone());
    let z = nets.encode(&mut g, store, obs, false)?.z_d;
    let z_next = nets.encode(&mut g, store, next, false)?.z_d;
    let z_next = g.stop_gradient(z_next);
    let a = g.constant(inp.actions.clone());
    let (mu, log_sigma) = nets.dynamics_predict_log(&mut g, store, z, a)?;
    let e = g.sub(z_next, mu)?;
    let neg = g.scale(log_sigma, -1.0)?;
    let inv_sigma = g.exp(neg)?;
    let scaled = g.mul(e, inv_sigma)?;
    let scaled = g.scale(scaled, 0.5)?;
    let sq = g.square(scaled)?;
    let loss = g.mean(sq)?;
    Ok(Built {
        graph: g,
        loss,
        stats: LossStats::default(),
    })
}

/// Builds the named loss, computing its detached inputs (targets, `y`,
/// `log π`) from the same parameters.
pub fn build_loss<T: Real>(kind: LossKind, nets: &Networks, store: &ParamStore<T>, inp: &LossInputs<T>, alpha: f64, s: &LossSettings) -> Result<Built<T>, LossError> {
    match kind {
        LossKind::Repr => repr_loss(nets, store, inp, &pair_targets(nets, store, inp)?, s),
        LossKind::Q => {
            let y = target_value(nets, store, inp, alpha, s)?;
            q_loss(nets, store, inp, &y, s)
        }
        LossKind::Actor => actor_loss(nets, store, inp, alpha, s),
        LossKind::Alpha => {
            let lp = actor_loss(nets, store, inp, alpha, s)?.stats.log_prob.expect("actor log-prob");
            alpha_loss(nets, store, &lp, s.target_entropy)
        }
        LossKind::Dynamics => dynamics_loss(nets, store, inp, s),
        LossKind::L1Baseline => l1_baseline_loss(nets, store, inp, &pair_targets(nets, store, inp)?, s),
    }
}

/// Finite-difference validation of every loss on a tiny random instance.
pub mod check {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use serde::Serialize;

    use super::*;
    use crate::diffcore::{finite_difference_check, GradCheckReport, Mutation};
    use crate::envs::Observation;
    use crate::nets::{IoShape, NetConfig, Variant};
    use crate::replay::{ReplayBuffer, Transition};

    pub const THRESHOLD: f64 = 1e-3;

    /// Small network: 16×16 RGB frames, 4-channel convs, 3-d embeddings.
    pub fn tiny_config() -> (NetConfig, IoShape) {
        let config = NetConfig {
            conv_layers: 4,
            conv_channels: 4,
            z_r: 3,
            z_d: 3,
            meta_hidden: 5,
            dynamics_hidden: 6,
            critic_hidden: 6,
            actor_hidden: [5, 6],
            ..NetConfig::desk()
        };
        let io = IoShape {
            channels: 3,
            frame_size: 16,
            action_dim: 2,
        };
        (config, io)
    }

    pub fn settings(weights: WeightMode) -> LossSettings {
        LossSettings {
            gamma: 0.9,
            weights,
            entropy_sign: EntropySign::Standard,
            target_entropy: -2.0,
        }
    }

    /// Random transitions of the tiny shape, one pair batch of size `batch`.
    pub fn tiny_inputs<R: Rng>(io: IoShape, batch: usize, pad: usize, rng: &mut R) -> LossInputs<f64> {
        let shape = [io.channels, io.frame_size, io.frame_size];
        let numel = shape.iter().product();
        let mut buffer = ReplayBuffer::new(batch).expect("capacity");
        let mut obs = || Observation {
            shape,
            data: (0..numel).map(|_| rng.random()).collect(),
        };
        let items: Vec<(Observation, Observation)> = (0..batch).map(|_| (obs(), obs())).collect();
        for (k, (o, n)) in items.into_iter().enumerate() {
            buffer
                .push(Transition {
                    obs: o,
                    action: (0..io.action_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    reward: rng.random_range(0.0..4.0),
                    next_obs: n,
                    done: k == 0,
                })
                .expect("well-formed");
        }
        // Every stored row exactly once, paired against a random permutation.
        let mut pair = buffer.sample_pair_batch(batch, rng).expect("batch");
        pair.i = (0..batch).map(|k| buffer.get(k).expect("row")).collect();
        pair.j = pair.perm.iter().map(|&p| pair.i[p]).collect();
        prepare_inputs(&pair, shape, pad, io.action_dim, rng).expect("inputs")
    }

    pub fn tiny_networks(variant: Variant, seed: u64) -> (Networks, ParamStore<f64>) {
        let (config, io) = tiny_config();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = Networks::new(config, io, variant, &mut store, &mut rng).expect("tiny networks");
        // Nonzero biases so no unit sits exactly at a ReLU kink.
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("/b") {
                for v in store.get_mut(id).data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        if let Some(id) = store.lookup("eta_c") {
            store.get_mut(id).data_mut()[0] = 0.3;
        }
        let store = store.cast::<f64>();
        (nets, store)
    }

    #[derive(Debug, Clone, Serialize)]
    pub struct LossCheck {
        pub loss: &'static str,
        pub passed: bool,
        pub report: GradCheckReport,
    }

    /// Gradient-checks all six losses; `mutation` injects a backward fault.
    pub fn check_all_losses(seed: u64, mutation: Option<Mutation>) -> Result<Vec<LossCheck>, LossError> {
        let mut out = Vec::new();
        for kind in LossKind::ALL {
            let (nets, store) = tiny_networks(Variant::default(), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let inp = tiny_inputs(nets.io, 3, 2, &mut rng);
            let s = settings(WeightMode::Adaptive);
            let alpha = 0.1;
            let ids = kind.update_set(&nets, s.weights);
            // Targets and log-probs are data for the losses that consume them.
            let y = target_value(&nets, &store, &inp, alpha, &s)?;
            let log_prob = actor_loss(&nets, &store, &inp, alpha, &s)?.stats.log_prob.expect("log-prob");
            let targets = pair_targets(&nets, &store, &inp)?;
            let report = finite_difference_check(&store, &ids, 1e-6, 6, |st| {
                let built = match kind {
                    LossKind::Q => q_loss(&nets, st, &inp, &y, &s),
                    LossKind::Alpha => alpha_loss(&nets, st, &log_prob, s.target_entropy),
                    LossKind::Repr => repr_loss(&nets, st, &inp, &targets, &s),
                    LossKind::L1Baseline => l1_baseline_loss(&nets, st, &inp, &targets, &s),
                    _ => build_loss(kind, &nets, st, &inp, alpha, &s),
                }
                .map_err(|e| DiffError::Checkpoint(e.to_string()))?;
                let mut graph = built.graph;
                graph.set_mutation(mutation);
                let grads = graph.backward(built.loss)?;
                let value = graph.value(built.loss).item();
                Ok((value, ids.iter().map(|&id| grads.wrt_param(id).cloned()).collect()))
            })?;
            out.push(LossCheck {
                loss: kind.name(),
                passed: report.passed(THRESHOLD),
                report,
            });
        }
        Ok(out)
    }

    /// Largest gradient one loss sends into one parameter group.
    #[derive(Debug, Clone, Serialize)]
    pub struct LedgerEntry {
        pub loss: &'static str,
        pub group: &'static str,
        pub max_abs_grad: f64,
        /// Whether the group belongs to the loss's update set.
        pub expected: bool,
    }

    impl LedgerEntry {
        /// Exactly zero outside the update set, nonzero inside it.
        pub fn passed(&self) -> bool {
            if self.expected {
                self.max_abs_grad > 0.0
            } else {
                self.max_abs_grad == 0.0
            }
        }
    }

    /// Backpropagates every loss once and records which parameter groups
    /// receive gradient: `(loss, group)` for all six losses and eight groups.
    pub fn stop_gradient_ledger(seed: u64) -> Result<Vec<LedgerEntry>, LossError> {
        let (nets, store) = tiny_networks(Variant::default(), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let inp = tiny_inputs(nets.io, 4, 2, &mut rng);
        let s = settings(WeightMode::Adaptive);
        let groups: [(&str, Vec<ParamId>); 8] = [
            ("conv", nets.conv_ids(false)),
            ("heads", nets.head_ids(false)),
            ("meta", nets.meta_ids()),
            ("dynamics", nets.dynamics_ids()),
            ("critics", nets.critic_ids(false)),
            ("actor", nets.actor_ids()),
            ("eta_c", vec![nets.eta_c]),
            ("log_alpha", vec![nets.log_alpha]),
        ];
        let mut out = Vec::new();
        for kind in LossKind::ALL {
            let built = build_loss(kind, &nets, &store, &inp, 0.1, &s)?;
            let grads = built.graph.backward(built.loss)?;
            let update = kind.update_set(&nets, s.weights);
            for (group, ids) in &groups {
                out.push(LedgerEntry {
                    loss: kind.name(),
                    group,
                    max_abs_grad: grads.max_abs(ids),
                    expected: ids.iter().any(|id| update.contains(id)),
                });
            }
        }
        Ok(out)
    }
}
