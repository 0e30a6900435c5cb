//! The training loop: SAC on top of the adaptive bisimulation representation,
//! environment interaction, evaluation, checkpoints, and the tabular
//! oracle-fit harness used to compare similarity forms.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bisim::{BisimError, SupervisionRecord};
use crate::diffcore::{load_tensors, save_tensors, Adam, AdamConfig, DiffError, Graph, ParamId, ParamStore, StepOutcome, Tensor};
use crate::envs::{render_tabular, EnvConfig, EnvError, Observation, PointMass, Split, TabularBackground};
use crate::losses::{
    actor_loss, alpha_loss, dynamics_loss, l1_baseline_loss, pair_targets, prepare_inputs, q_loss, repr_loss, target_value, Built, EntropySign, LossError, LossInputs, LossKind,
    LossSettings, WeightMode,
};
use crate::nets::{pixels_to_tensor, IoShape, NetConfig, Networks, Variant};
use crate::replay::{ReplayBuffer, ReplayError, Transition};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Bisim(#[from] BisimError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Ablation switches; all off is the full method.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// No random-crop augmentation.
    pub no_aug: bool,
    /// L1 latent distance in place of the meta-learners.
    pub l1_baseline: bool,
    /// One embedding and one meta-learner regressing the summed target.
    pub no_c_split: bool,
    /// Constant dynamics weight `c ∈ (0, 1)` instead of the learned one.
    pub fixed_c: Option<f64>,
    /// Branch weights `(1, γ)`.
    pub weights_1_gamma: bool,
    /// Actor reads the (detached) embeddings instead of the conv features.
    pub share_full_encoder: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Learning rate of every group except the temperature.
    pub lr: f64,
    pub alpha_lr: f64,
    pub batch_size: usize,
    pub gamma: f64,
    /// Soft-update rate of the target critics.
    pub tau_q: f64,
    /// Soft-update rate of the target encoder and target `η_c`.
    pub tau_encoder: f64,
    /// Actor, temperature and target updates happen when `step % update_every == 0`.
    pub update_every: u64,
    /// Random-crop padding in pixels.
    pub crop_pad: usize,
    pub buffer_capacity: usize,
    /// Agent steps (policy decisions); each is `action_repeat` env ticks.
    pub total_steps: u64,
    /// Agent steps of uniform random actions before the actor takes over
    /// and training starts.
    pub warmup_steps: u64,
    pub seed: u64,
    pub entropy_sign: EntropySign,
    /// Defaults to `−action_dim`.
    pub target_entropy: Option<f64>,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            alpha_lr: 1e-4,
            batch_size: 128,
            gamma: 0.99,
            tau_q: 0.01,
            tau_encoder: 0.05,
            update_every: 2,
            crop_pad: 4,
            buffer_capacity: 100_000,
            // 50k and 1k environment ticks at action repeat 4.
            total_steps: 12_500,
            warmup_steps: 250,
            seed: 1,
            entropy_sign: EntropySign::Standard,
            target_entropy: None,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::Config(m));
        for (name, v) in [("lr", self.lr), ("alpha_lr", self.alpha_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        for (name, v) in [("tau_q", self.tau_q), ("tau_encoder", self.tau_encoder)] {
            if !(v > 0.0 && v <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {v}"));
            }
        }
        if self.batch_size == 0 || self.update_every == 0 || self.buffer_capacity == 0 || self.total_steps == 0 {
            return bad("batch_size, update_every, buffer_capacity and total_steps must be positive".into());
        }
        if let Some(c) = self.ablation.fixed_c {
            if !(c > 0.0 && c < 1.0) {
                return bad(format!("ablation.fixed_c must lie in (0, 1), got {c}"));
            }
            if self.ablation.weights_1_gamma {
                return bad("ablation.fixed_c and ablation.weights_1_gamma are exclusive".into());
            }
        }
        if self.ablation.l1_baseline && self.ablation.no_c_split {
            return bad("ablation.l1_baseline and ablation.no_c_split are exclusive".into());
        }
        if self.target_entropy.is_some_and(|h| !h.is_finite()) {
            return bad("target_entropy must be finite".into());
        }
        Ok(())
    }

    pub fn weight_mode(&self) -> WeightMode {
        match (self.ablation.fixed_c, self.ablation.weights_1_gamma) {
            (Some(c), _) => WeightMode::Fixed(c),
            (None, true) => WeightMode::OneGamma,
            (None, false) => WeightMode::Adaptive,
        }
    }

    pub fn variant(&self) -> Variant {
        Variant {
            single_embedding: self.ablation.no_c_split,
            actor_on_embeddings: self.ablation.share_full_encoder,
        }
    }

    pub fn loss_settings(&self, action_dim: usize) -> LossSettings {
        LossSettings {
            gamma: self.gamma,
            weights: self.weight_mode(),
            entropy_sign: self.entropy_sign,
            target_entropy: self.target_entropy.unwrap_or(-(action_dim as f64)),
        }
    }

    pub fn crop_padding(&self) -> usize {
        if self.ablation.no_aug {
            0
        } else {
            self.crop_pad
        }
    }
}

/// Diagnostics of one training step. Losses whose update was skipped are
/// still reported (possibly non-finite) and listed in `skipped`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub step: u64,
    /// Representation loss (the L1 baseline objective under that ablation).
    pub repr_loss: f64,
    pub reward_term: Option<f64>,
    pub dynamics_term: Option<f64>,
    pub q_loss: f64,
    pub actor_loss: Option<f64>,
    pub alpha_loss: Option<f64>,
    pub dynamics_loss: f64,
    pub alpha: f64,
    /// Dynamics-branch weight used by the critics this step.
    pub c: f64,
    pub norm_r: Option<f64>,
    pub norm_d: Option<f64>,
    /// `|`-separated names of losses whose update was skipped.
    pub skipped: String,
}

struct Optimizers {
    q: Adam<f32>,
    actor: Adam<f32>,
    alpha: Adam<f32>,
    repr: Adam<f32>,
    dynamics: Adam<f32>,
}

pub struct Agent {
    config: TrainConfig,
    nets: Networks,
    store: ParamStore<f32>,
    optim: Optimizers,
    settings: LossSettings,
    step: u64,
    consecutive_skips: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    train: TrainConfig,
    net: NetConfig,
    io: IoShape,
    step: u64,
}

impl Agent {
    /// Builds networks and optimizers; parameters are drawn from a stream
    /// seeded by `config.seed` only, so a checkpoint can rebuild the layout.
    pub fn new(config: TrainConfig, net: NetConfig, io: IoShape) -> Result<Self, AgentError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let nets = Networks::new(net, io, config.variant(), &mut store, &mut rng)?;
        let settings = config.loss_settings(io.action_dim);
        let adam = |lr: f64, ids: Vec<ParamId>| Adam::new(AdamConfig::with_lr(lr), ids, &store);
        let repr_kind = if config.ablation.l1_baseline { LossKind::L1Baseline } else { LossKind::Repr };
        let optim = Optimizers {
            q: adam(config.lr, LossKind::Q.update_set(&nets, settings.weights))?,
            actor: adam(config.lr, LossKind::Actor.update_set(&nets, settings.weights))?,
            alpha: adam(config.alpha_lr, LossKind::Alpha.update_set(&nets, settings.weights))?,
            repr: adam(config.lr, repr_kind.update_set(&nets, settings.weights))?,
            dynamics: adam(config.lr, LossKind::Dynamics.update_set(&nets, settings.weights))?,
        };
        Ok(Self {
            config,
            nets,
            store,
            optim,
            settings,
            step: 0,
            consecutive_skips: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn nets(&self) -> &Networks {
        &self.nets
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn settings(&self) -> &LossSettings {
        &self.settings
    }

    /// Training steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Consecutive training steps in which at least one update was skipped.
    pub fn consecutive_skips(&self) -> u32 {
        self.consecutive_skips
    }

    pub fn alpha(&self) -> f64 {
        (self.store.get(self.nets.log_alpha).item() as f64).exp()
    }

    /// The current dynamics-branch weight of the online critics.
    pub fn c(&self) -> f64 {
        let mut g = Graph::no_grad();
        match crate::losses::branch_weights(&mut g, &self.nets, &self.store, false, self.settings.weights, self.settings.gamma, true) {
            Ok((_, c)) => c,
            Err(_) => f64::NAN,
        }
    }

    /// Action for one observation: `tanh(mean)` when `deterministic`,
    /// otherwise a sample from the squashed Gaussian.
    pub fn act<R: Rng + ?Sized>(&self, obs: &Observation, deterministic: bool, rng: &mut R) -> Result<Vec<f32>, AgentError> {
        let mut g = Graph::no_grad();
        let x = g.constant(pixels_to_tensor::<f32>(&[&obs.data], self.nets.obs_shape(), None)?);
        let features = self.nets.actor_features(&mut g, &self.store, x)?;
        let (mean, log_std) = self.nets.actor_forward(&mut g, &self.store, features)?;
        let action = if deterministic {
            g.tanh(mean)?
        } else {
            let a = self.nets.io.action_dim;
            let noise = (0..a).map(|_| StandardNormal.sample(rng)).collect();
            let noise = g.constant(Tensor::new(&[1, a], noise)?);
            self.nets.actor_sample(&mut g, mean, log_std, noise)?.0
        };
        Ok(g.value(action).data().iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }

    fn apply(store: &mut ParamStore<f32>, adam: &mut Adam<f32>, built: &Built<f32>, kind: LossKind, skipped: &mut Vec<&'static str>) -> Result<(), AgentError> {
        if !built.value().is_finite() {
            skipped.push(kind.name());
            return Ok(());
        }
        let grads = built.graph.backward(built.loss)?;
        if adam.step(store, &grads) == StepOutcome::SkippedNonFinite {
            skipped.push(kind.name());
        }
        Ok(())
    }

    /// One gradient step of every objective in the order: critic, actor and
    /// temperature (on update steps), representation, dynamics, then soft
    /// target updates (on update steps). A loss that evaluates to NaN/inf
    /// leaves its parameters untouched; the step still counts.
    pub fn train_step<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, rng: &mut R) -> Result<LossBundle, AgentError> {
        let batch = buffer.sample_pair_batch(self.config.batch_size, rng)?;
        let inp: LossInputs<f32> = prepare_inputs(&batch, self.nets.obs_shape(), self.config.crop_padding(), self.nets.io.action_dim, rng)?;
        let s = self.settings;
        let update = self.step % self.config.update_every == 0;
        let mut skipped = Vec::new();
        let mut row = LossBundle {
            step: self.step,
            alpha: self.alpha(),
            ..Default::default()
        };

        let y = target_value(&self.nets, &self.store, &inp, row.alpha, &s)?;
        let q = q_loss(&self.nets, &self.store, &inp, &y, &s)?;
        row.q_loss = q.value();
        row.c = q.stats.c.unwrap_or(f64::NAN);
        Self::apply(&mut self.store, &mut self.optim.q, &q, LossKind::Q, &mut skipped)?;
        drop(q);

        if update {
            let actor = actor_loss(&self.nets, &self.store, &inp, row.alpha, &s)?;
            row.actor_loss = Some(actor.value());
            Self::apply(&mut self.store, &mut self.optim.actor, &actor, LossKind::Actor, &mut skipped)?;
            let log_prob = actor.stats.log_prob.clone().expect("actor loss reports log-probabilities");
            drop(actor);
            let alpha = alpha_loss(&self.nets, &self.store, &log_prob, s.target_entropy)?;
            row.alpha_loss = Some(alpha.value());
            Self::apply(&mut self.store, &mut self.optim.alpha, &alpha, LossKind::Alpha, &mut skipped)?;
        }

        let targets = pair_targets(&self.nets, &self.store, &inp)?;
        let (repr, kind) = if self.config.ablation.l1_baseline {
            (l1_baseline_loss(&self.nets, &self.store, &inp, &targets, &s)?, LossKind::L1Baseline)
        } else {
            (repr_loss(&self.nets, &self.store, &inp, &targets, &s)?, LossKind::Repr)
        };
        row.repr_loss = repr.value();
        row.reward_term = repr.stats.reward_term;
        row.dynamics_term = repr.stats.dynamics_term;
        row.norm_r = repr.stats.norm_r;
        row.norm_d = repr.stats.norm_d;
        Self::apply(&mut self.store, &mut self.optim.repr, &repr, kind, &mut skipped)?;
        drop(repr);

        let dynamics = dynamics_loss(&self.nets, &self.store, &inp, &s)?;
        row.dynamics_loss = dynamics.value();
        Self::apply(&mut self.store, &mut self.optim.dynamics, &dynamics, LossKind::Dynamics, &mut skipped)?;

        if update {
            self.soft_update_targets(self.config.tau_q, self.config.tau_encoder)?;
        }
        self.consecutive_skips = if skipped.is_empty() { 0 } else { self.consecutive_skips + 1 };
        row.skipped = skipped.join("|");
        self.step += 1;
        Ok(row)
    }

    /// `target ← τ·online + (1 − τ)·target` for the critics (`tau_q`) and for
    /// the encoder and `η_c` (`tau_encoder`).
    pub fn soft_update_targets(&mut self, tau_q: f64, tau_encoder: f64) -> Result<(), AgentError> {
        self.store.soft_update(&self.nets.critic_pairs(), tau_q)?;
        self.store.soft_update(&self.nets.encoder_pairs(), tau_encoder)?;
        Ok(())
    }

    /// Writes `params.ambs` (every parameter by name) and `checkpoint.json`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), AgentError> {
        fs::create_dir_all(dir)?;
        let tensors: Vec<(String, Tensor<f32>)> = self.store.ids().map(|id| (self.store.name(id).to_string(), self.store.get(id).clone())).collect();
        save_tensors(&dir.join("params.ambs"), &tensors)?;
        let manifest = CheckpointManifest {
            train: self.config.clone(),
            net: self.nets.config.clone(),
            io: self.nets.io,
            step: self.step,
        };
        fs::write(dir.join("checkpoint.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Restores parameters and the step counter. Optimizer moments are not
    /// part of a checkpoint, so a restored agent is meant for evaluation.
    pub fn load_checkpoint(dir: &Path) -> Result<Self, AgentError> {
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("checkpoint.json"))?)?;
        let mut agent = Self::new(manifest.train, manifest.net, manifest.io)?;
        let tensors = load_tensors(&dir.join("params.ambs"))?;
        if tensors.len() != agent.store.len() {
            return Err(AgentError::Checkpoint(format!("{} tensors for {} parameters", tensors.len(), agent.store.len())));
        }
        for (name, t) in tensors {
            let id = agent.store.lookup(&name).ok_or_else(|| AgentError::Checkpoint(format!("unknown parameter {name}")))?;
            if agent.store.get(id).shape() != t.shape() {
                return Err(AgentError::Checkpoint(format!("shape mismatch for {name}")));
            }
            *agent.store.get_mut(id) = t;
        }
        agent.step = manifest.step;
        Ok(agent)
    }
}

/// Outcome of one interaction step.
#[derive(Debug, Clone)]
pub struct Collected {
    pub transition: Transition,
    /// Set when this step ended an episode.
    pub episode_return: Option<f64>,
}

/// Drives a training environment, resetting it automatically between episodes.
pub struct Collector {
    env: PointMass,
    obs: Observation,
    seed: u64,
    episodes: u64,
    steps: u64,
    episode_return: f64,
}

fn episode_seed(seed: u64, episode: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(episode)
}

impl Collector {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self, AgentError> {
        let mut env = PointMass::new(config)?;
        let obs = env.reset(episode_seed(seed, 0));
        Ok(Self {
            env,
            obs,
            seed,
            episodes: 0,
            steps: 0,
            episode_return: 0.0,
        })
    }

    /// Agent steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    /// Takes one action (uniform on `[−1, 1]^k` during the first `warmup`
    /// steps, a stochastic actor sample afterwards) and stores the
    /// transition. Episodes end only at the time limit, which is not a
    /// terminal state, so stored transitions keep bootstrapping.
    pub fn collect_step<R: Rng + ?Sized>(&mut self, agent: &Agent, buffer: &mut ReplayBuffer, rng: &mut R, warmup: u64) -> Result<Collected, AgentError> {
        let action: Vec<f32> = if self.steps < warmup {
            (0..self.env.action_dim()).map(|_| rng.random_range(-1.0f32..=1.0)).collect()
        } else {
            agent.act(&self.obs, false, rng)?
        };
        let step = self.env.step(&action)?;
        self.steps += 1;
        self.episode_return += step.reward as f64;
        let transition = Transition {
            obs: std::mem::replace(&mut self.obs, step.obs.clone()),
            action,
            reward: step.reward,
            next_obs: step.obs,
            done: false,
        };
        buffer.push(transition.clone())?;
        let mut episode_return = None;
        if step.done {
            episode_return = Some(std::mem::take(&mut self.episode_return));
            self.episodes += 1;
            self.obs = self.env.reset(episode_seed(self.seed, self.episodes));
        }
        Ok(Collected { transition, episode_return })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

/// Runs `episodes` deterministic-policy episodes on the held-out background
/// split of `env_config`.
pub fn evaluate(agent: &Agent, env_config: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalStats, AgentError> {
    if episodes == 0 {
        return Err(AgentError::Config("evaluation needs at least one episode".into()));
    }
    let mut config = env_config.clone();
    config.background.split = Split::Eval;
    let mut env = PointMass::new(config)?;
    // Deterministic actions never draw from this.
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut returns = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let mut obs = env.reset(episode_seed(seed, k as u64));
        let mut total = 0.0;
        loop {
            let action = agent.act(&obs, true, &mut unused)?;
            let step = env.step(&action)?;
            total += step.reward as f64;
            obs = step.obs;
            if step.done {
                break;
            }
        }
        returns.push(total);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalStats { mean, std, returns })
}

/// Which similarity form the oracle fit trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitVariant {
    /// `(1 − c)·f_r(φ_r(s_i), φ_r(s_j)) + c·f_d(φ_d(s_i), φ_d(s_j))`.
    MetaLearner,
    /// `‖φ(s_i) − φ(s_j)‖₁` with `φ = [φ_r : φ_d]`.
    L1Distance,
}

impl FitVariant {
    pub fn name(self) -> &'static str {
        match self {
            FitVariant::MetaLearner => "meta_learner",
            FitVariant::L1Distance => "l1_distance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    /// Frame side of the rendered tabular states.
    pub frame_size: usize,
    /// Redraw a noise background around each state glyph every step.
    pub noise_background: bool,
    /// States sampled per step and paired by a random permutation, as in
    /// training; `None` regresses every supplied pair each step.
    pub batch_size: Option<usize>,
    pub net: NetConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 1e-3,
            frame_size: 24,
            noise_background: true,
            batch_size: Some(64),
            net: NetConfig {
                conv_channels: 16,
                z_r: 16,
                z_d: 16,
                dynamics_hidden: 32,
                critic_hidden: 32,
                actor_hidden: [16, 16],
                ..NetConfig::desk()
            },
        }
    }
}

/// Per-step regression curves of one oracle fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitCurve {
    pub variant: FitVariant,
    /// The objective each variant minimizes.
    pub train_loss: Vec<f64>,
    /// `mean (d̂(s_i, s_j) − d*(s_i, s_j))²` of the predicted total distance,
    /// the quantity compared across variants.
    pub distance_error: Vec<f64>,
}

impl FitCurve {
    /// Mean distance error over the last `window` steps.
    pub fn smoothed_final(&self, window: usize) -> f64 {
        let tail = &self.distance_error[self.distance_error.len().saturating_sub(window.max(1))..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

fn column(v: &[f64]) -> Tensor<f32> {
    Tensor::new(&[v.len(), 1], v.iter().map(|&x| x as f32).collect()).expect("column")
}

/// Regresses exact bisimulation targets from rendered states with Adam
/// (full batch, or sampled state pairs when `batch_size` is set): the meta-learner variant fits `f_r` to the reward gap and `f_d` to
/// the transition distance (weights `1 − c` and `c`), the L1 variant fits the
/// latent L1 distance to the combined distance. Both see the same data,
/// steps and learning rate; initialization depends only on `seed`.
pub fn fit_to_oracle(records: &[SupervisionRecord], n_states: usize, c: f64, variant: FitVariant, config: &FitConfig, seed: u64) -> Result<FitCurve, AgentError> {
    if records.is_empty() || records.iter().any(|r| r.i >= n_states || r.j >= n_states) {
        return Err(AgentError::Config("supervision records must index the given states".into()));
    }
    if !(c > 0.0 && c < 1.0) {
        return Err(AgentError::Config(format!("c must lie in (0, 1), got {c}")));
    }
    let io = IoShape {
        channels: 3,
        frame_size: config.frame_size,
        action_dim: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let nets = Networks::new(config.net.clone(), io, Variant::default(), &mut store, &mut rng)?;
    let mut trained = nets.encoder_ids(false);
    if variant == FitVariant::MetaLearner {
        trained.extend(nets.meta_ids());
    }
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr), trained, &store)?;

    let mut table = vec![None; n_states * n_states];
    for r in records {
        table[r.i * n_states + r.j] = Some((r.target_r, r.target_d, r.target_total));
    }
    let render = |states: &[usize], rng: &mut ChaCha8Rng| -> Result<Tensor<f32>, AgentError> {
        let frames = states
            .iter()
            .map(|&k| {
                let bg = if config.noise_background { TabularBackground::Noise(&mut *rng) } else { TabularBackground::None };
                render_tabular(k, n_states, config.frame_size, bg)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let views: Vec<&[u8]> = frames.iter().map(|o| o.data.as_slice()).collect();
        Ok(pixels_to_tensor(&views, nets.obs_shape(), None)?)
    };
    let all_states: Vec<usize> = (0..n_states).collect();
    let full_is: Vec<usize> = records.iter().map(|r| r.i).collect();
    let full_js: Vec<usize> = records.iter().map(|r| r.j).collect();
    let fixed_frames = render(&all_states, &mut rng)?;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);
    batch_rng.set_stream(1);

    let mut curve = FitCurve {
        variant,
        train_loss: Vec::with_capacity(config.steps),
        distance_error: Vec::with_capacity(config.steps),
    };
    for _ in 0..config.steps {
        // Rows of `frames` are states; `is`/`js` index those rows.
        let (frames, is, js, targets) = match config.batch_size {
            None => {
                let frames = if config.noise_background { render(&all_states, &mut rng)? } else { fixed_frames.clone() };
                let targets: Vec<_> = records.iter().map(|r| (r.target_r, r.target_d, r.target_total)).collect();
                (frames, full_is.clone(), full_js.clone(), targets)
            }
            Some(b) => {
                let states: Vec<usize> = (0..b).map(|_| batch_rng.random_range(0..n_states)).collect();
                let mut js: Vec<usize> = (0..b).collect();
                js.shuffle(&mut batch_rng);
                let targets = (0..b)
                    .map(|k| table[states[k] * n_states + states[js[k]]].ok_or_else(|| AgentError::Config(format!("no supervision for pair ({}, {})", states[k], states[js[k]]))))
                    .collect::<Result<Vec<_>, _>>()?;
                let frames = if config.noise_background {
                    render(&states, &mut rng)?
                } else {
                    fixed_frames.gather_rows(&states)
                };
                (frames, (0..b).collect(), js, targets)
            }
        };
        let t_r = column(&targets.iter().map(|t| t.0).collect::<Vec<_>>());
        let t_d = column(&targets.iter().map(|t| t.1).collect::<Vec<_>>());
        let t_total = column(&targets.iter().map(|t| t.2).collect::<Vec<_>>());
        let mut g = Graph::new();
        let x = g.constant(frames);
        let enc = nets.encode(&mut g, &store, x, false)?;
        let total = g.constant(t_total.clone());
        let (loss, prediction) = match variant {
            FitVariant::MetaLearner => {
                let (zri, zrj) = (g.gather_rows(enc.z_r, &is)?, g.gather_rows(enc.z_r, &js)?);
                let (zdi, zdj) = (g.gather_rows(enc.z_d, &is)?, g.gather_rows(enc.z_d, &js)?);
                let fr = nets.meta_similarity(&mut g, &store, false, zri, zrj)?;
                let fd = nets.meta_similarity(&mut g, &store, true, zdi, zdj)?;
                let (tr, td) = (g.constant(t_r.clone()), g.constant(t_d.clone()));
                let er = g.sub(fr, tr)?;
                let er = g.square(er)?;
                let er = g.scale(er, 1.0 - c)?;
                let ed = g.sub(fd, td)?;
                let ed = g.square(ed)?;
                let ed = g.scale(ed, c)?;
                let sum = g.add(er, ed)?;
                let loss = g.mean(sum)?;
                let pr = g.scale(fr, 1.0 - c)?;
                let pd = g.scale(fd, c)?;
                (loss, g.add(pr, pd)?)
            }
            FitVariant::L1Distance => {
                let phi = g.concat(&[enc.z_r, enc.z_d], 1)?;
                let (pi, pj) = (g.gather_rows(phi, &is)?, g.gather_rows(phi, &js)?);
                let diff = g.sub(pi, pj)?;
                let diff = g.abs(diff)?;
                let dist = g.sum_last(diff)?;
                let e = g.sub(dist, total)?;
                let e = g.square(e)?;
                (g.mean(e)?, dist)
            }
        };
        let err = g.sub(prediction, total)?;
        let err = g.square(err)?;
        let err = g.mean(err)?;
        curve.train_loss.push(g.value(loss).item() as f64);
        curve.distance_error.push(g.value(err).item() as f64);
        let grads = g.backward(loss)?;
        adam.step(&mut store, &grads);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_agent(ablation: Ablation) -> (Agent, EnvConfig) {
        let env = EnvConfig {
            frame_size: 16,
            episode_len: 10,
            ..EnvConfig::default()
        };
        let train = TrainConfig {
            batch_size: 4,
            warmup_steps: 5,
            ablation,
            ..TrainConfig::default()
        };
        let net = NetConfig {
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
            channels: env.obs_shape()[0],
            frame_size: env.frame_size,
            action_dim: 2,
        };
        (Agent::new(train, net, io).unwrap(), env)
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.ablation.fixed_c = Some(1.0);
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.tau_q = 0.0;
        assert!(c.validate().is_err());
        let c: Result<TrainConfig, _> = serde_json::from_str(r#"{"lr": 0.1, "bogus": 1}"#);
        assert!(c.is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_actions() {
        let (agent, env) = tiny_agent(Ablation::default());
        let dir = tempfile::tempdir().unwrap();
        agent.save_checkpoint(dir.path()).unwrap();
        let restored = Agent::load_checkpoint(dir.path()).unwrap();
        let mut e = PointMass::new(env).unwrap();
        let obs = e.reset(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(agent.act(&obs, true, &mut rng).unwrap(), restored.act(&obs, true, &mut rng).unwrap());
    }

    #[test]
    fn collector_resets_between_episodes() {
        let (agent, env) = tiny_agent(Ablation::default());
        let mut collector = Collector::new(env, 0).unwrap();
        let mut buffer = ReplayBuffer::new(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ends = 0;
        for k in 0..25 {
            let out = collector.collect_step(&agent, &mut buffer, &mut rng, 5).unwrap();
            assert_eq!(buffer.len(), k + 1);
            if out.episode_return.is_some() {
                ends += 1;
            }
        }
        assert_eq!(ends, 2);
    }
}
