//! Network blocks: shared conv trunk, reward/dynamics heads, meta-learners,
//! probabilistic dynamics model, twin critics, squashed-Gaussian actor and
//! the adaptive weight `c`. Parameters live in a [`ParamStore`]; the structs
//! here only hold ids, so the same wiring runs in `f32` for training and in
//! `f64` for gradient checks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{apply_crop_into, CropParams};
use crate::diffcore::{DiffError, Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const TARGET_PREFIX: &str = "target/";
/// Keeps `log(1 − tanh²u)` finite when the squashed action saturates.
const SQUASH_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub z_r: usize,
    pub z_d: usize,
    pub meta_hidden: usize,
    pub dynamics_hidden: usize,
    pub critic_hidden: usize,
    /// First actor hidden width, then the width of the remaining hidden layers.
    pub actor_hidden: [usize; 2],
    pub log_std_bounds: [f64; 2],
    pub sigma_bounds: [f64; 2],
    pub init_temperature: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetConfig {
    pub fn desk() -> Self {
        Self {
            conv_layers: 4,
            conv_channels: 32,
            z_r: 32,
            z_d: 32,
            meta_hidden: 50,
            dynamics_hidden: 512,
            critic_hidden: 256,
            actor_hidden: [64, 256],
            log_std_bounds: [-10.0, 2.0],
            sigma_bounds: [1e-2, 1e1],
            init_temperature: 0.1,
        }
    }

    pub fn paper() -> Self {
        Self {
            z_r: 50,
            z_d: 50,
            critic_hidden: 1024,
            actor_hidden: [100, 1024],
            ..Self::desk()
        }
    }
}

/// Input/output sizes fixed by the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoShape {
    pub channels: usize,
    pub frame_size: usize,
    pub action_dim: usize,
}

/// Architectural switches used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Variant {
    /// One embedding and one meta-learner instead of the reward/dynamics split.
    pub single_embedding: bool,
    /// Actor reads the (detached) embeddings instead of the conv features.
    pub actor_on_embeddings: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, DiffError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Fully connected layers with ReLU between them and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var, DiffError> {
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if k + 1 < self.layers.len() {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct ConvNet {
    pub layers: Vec<(ParamId, ParamId, usize)>,
}

impl ConvNet {
    /// `[N,C,H,W]` → flattened `[N, features]`, ReLU after every layer.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var, DiffError> {
        for &(w, b, stride) in &self.layers {
            let (w, b) = (g.param(store, w), g.param(store, b));
            x = g.conv2d(x, w, Some(b), stride)?;
            x = g.relu(x)?;
        }
        let shape = g.shape(x).to_vec();
        g.reshape(x, &[shape[0], shape[1..].iter().product()])
    }
}

/// Spatial side after the conv stack: stride 2 on the first 3×3 layer, 1 after.
pub fn conv_output_side(frame_size: usize, layers: usize) -> Option<usize> {
    let mut side = frame_size;
    for k in 0..layers {
        let stride = if k == 0 { 2 } else { 1 };
        side = side.checked_sub(3)? / stride + 1;
    }
    Some(side)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub conv: ConvNet,
    pub head_r: Linear,
    /// Absent with a single embedding.
    pub head_d: Option<Linear>,
}

/// Output of [`Networks::encode`]. With a single embedding `z_r == z_d`.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub conv: Var,
    pub z_r: Var,
    pub z_d: Var,
}

/// Weights multiplying the reward and dynamics branches (`1 − c` and `c`).
#[derive(Debug, Clone, Copy)]
pub struct BranchWeights {
    pub reward: Var,
    pub dynamics: Var,
}

#[derive(Debug, Clone)]
pub struct Networks {
    pub config: NetConfig,
    pub io: IoShape,
    pub variant: Variant,
    pub encoder: Encoder,
    pub target_encoder: Encoder,
    pub f_r: Mlp,
    /// Absent with a single embedding.
    pub f_d: Option<Mlp>,
    pub dynamics: Mlp,
    pub critics: [Mlp; 2],
    pub target_critics: [Mlp; 2],
    pub actor: Mlp,
    pub eta_c: ParamId,
    pub target_eta_c: ParamId,
    pub log_alpha: ParamId,
}

/// Orthogonal matrix `rows×cols` scaled by `gain` (QR of a Gaussian matrix,
/// sign-corrected so the draw is Haar-distributed).
pub fn orthogonal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let (m, n) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::<f64>::from_fn(m, n, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(gain * q[(i, j)]);
        }
    }
    out
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

struct Builder<'a, R: Rng + ?Sized> {
    store: &'a mut ParamStore<f32>,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn tensor(&mut self, name: String, shape: &[usize], data: Vec<f64>) -> Result<ParamId, DiffError> {
        self.store.add(name, Tensor::<f32>::from_f64(shape, &data)?)
    }

    fn linear(&mut self, name: &str, input: usize, output: usize, gain: f64) -> Result<Linear, DiffError> {
        let w = orthogonal(self.rng, input, output, gain);
        Ok(Linear {
            w: self.tensor(format!("{name}/w"), &[input, output], w)?,
            b: self.tensor(format!("{name}/b"), &[output], vec![0.0; output])?,
        })
    }

    /// Hidden layers get the ReLU gain, the output layer gain 1.
    fn mlp(&mut self, name: &str, widths: &[usize]) -> Result<Mlp, DiffError> {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|k| self.linear(&format!("{name}/{k}"), widths[k], widths[k + 1], if k + 1 < n { RELU_GAIN } else { 1.0 }))
            .collect::<Result<_, _>>()?;
        Ok(Mlp { layers })
    }

    /// Delta-orthogonal kernels: the centre tap is an orthogonal `O×C` map.
    fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Result<(ParamId, ParamId, usize), DiffError> {
        let centre = orthogonal(self.rng, out_ch, in_ch, RELU_GAIN);
        let mut w = vec![0.0; out_ch * in_ch * 9];
        for o in 0..out_ch {
            for c in 0..in_ch {
                w[(o * in_ch + c) * 9 + 4] = centre[o * in_ch + c];
            }
        }
        Ok((
            self.tensor(format!("{name}/w"), &[out_ch, in_ch, 3, 3], w)?,
            self.tensor(format!("{name}/b"), &[out_ch], vec![0.0; out_ch])?,
            stride,
        ))
    }

    fn clone_linear(&mut self, name: &str, src: &Linear) -> Result<Linear, DiffError> {
        Ok(Linear {
            w: self.copy(format!("{name}/w"), src.w)?,
            b: self.copy(format!("{name}/b"), src.b)?,
        })
    }

    fn copy(&mut self, name: String, src: ParamId) -> Result<ParamId, DiffError> {
        let value = self.store.get(src).clone();
        self.store.add(name, value)
    }

    fn clone_mlp(&mut self, name: &str, src: &Mlp) -> Result<Mlp, DiffError> {
        let layers = src
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| self.clone_linear(&format!("{name}/{k}"), l))
            .collect::<Result<_, _>>()?;
        Ok(Mlp { layers })
    }

    fn clone_encoder(&mut self, prefix: &str, src: &Encoder) -> Result<Encoder, DiffError> {
        let layers = src
            .conv
            .layers
            .iter()
            .enumerate()
            .map(|(k, &(w, b, s))| Ok((self.copy(format!("{prefix}conv/{k}/w"), w)?, self.copy(format!("{prefix}conv/{k}/b"), b)?, s)))
            .collect::<Result<_, DiffError>>()?;
        Ok(Encoder {
            conv: ConvNet { layers },
            head_r: self.clone_linear(&format!("{prefix}head_r"), &src.head_r)?,
            head_d: src.head_d.as_ref().map(|h| self.clone_linear(&format!("{prefix}head_d"), h)).transpose()?,
        })
    }
}

/// One block of the shape audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockAudit {
    pub name: String,
    pub params: usize,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

impl Networks {
    /// Registers every online and target parameter in `store`.
    pub fn new<R: Rng + ?Sized>(config: NetConfig, io: IoShape, variant: Variant, store: &mut ParamStore<f32>, rng: &mut R) -> Result<Self, DiffError> {
        let side = conv_output_side(io.frame_size, config.conv_layers).filter(|&s| s > 0).ok_or(DiffError::Shape {
            op: "conv stack",
            shapes: vec![vec![io.channels, io.frame_size, io.frame_size]],
        })?;
        let features = config.conv_channels * side * side;
        let (z_r, z_d) = Self::embedding_dims(&config, variant);
        let a = io.action_dim;
        let mut b = Builder { store, rng };
        let conv = ConvNet {
            layers: (0..config.conv_layers)
                .map(|k| {
                    let in_ch = if k == 0 { io.channels } else { config.conv_channels };
                    b.conv(&format!("conv/{k}"), in_ch, config.conv_channels, if k == 0 { 2 } else { 1 })
                })
                .collect::<Result<_, _>>()?,
        };
        let head_r = b.linear("head_r", features, z_r, 1.0)?;
        let head_d = if variant.single_embedding { None } else { Some(b.linear("head_d", features, z_d, 1.0)?) };
        let encoder = Encoder { conv, head_r, head_d };
        let f_r = b.mlp("f_r", &[2 * z_r, config.meta_hidden, 1])?;
        let f_d = if variant.single_embedding { None } else { Some(b.mlp("f_d", &[2 * z_d, config.meta_hidden, 1])?) };
        let dynamics = b.mlp("dynamics", &[z_d + a, config.dynamics_hidden, 2 * z_d])?;
        let critic_in = Self::critic_input_dim(&config, a);
        let h = config.critic_hidden;
        let critics = [b.mlp("critic1", &[critic_in, h, h, 1])?, b.mlp("critic2", &[critic_in, h, h, 1])?];
        let actor_in = if variant.actor_on_embeddings { critic_in - a } else { features };
        let [h1, h2] = config.actor_hidden;
        let actor = b.mlp("actor", &[actor_in, h1, h2, h2, 2 * a])?;
        let eta_c = b.tensor("eta_c".into(), &[2], vec![0.0, 0.0])?;
        let log_alpha = b.tensor("log_alpha".into(), &[1], vec![config.init_temperature.ln()])?;
        let target_encoder = b.clone_encoder(TARGET_PREFIX, &encoder)?;
        let target_critics = [b.clone_mlp("target/critic1", &critics[0])?, b.clone_mlp("target/critic2", &critics[1])?];
        let target_eta_c = b.copy("target/eta_c".into(), eta_c)?;
        Ok(Self {
            config,
            io,
            variant,
            encoder,
            target_encoder,
            f_r,
            f_d,
            dynamics,
            critics,
            target_critics,
            actor,
            eta_c,
            target_eta_c,
            log_alpha,
        })
    }

    fn embedding_dims(config: &NetConfig, variant: Variant) -> (usize, usize) {
        if variant.single_embedding {
            let z = config.z_r + config.z_d;
            (z, z)
        } else {
            (config.z_r, config.z_d)
        }
    }

    fn critic_input_dim(config: &NetConfig, action_dim: usize) -> usize {
        config.z_r + config.z_d + action_dim
    }

    pub fn conv_features(&self) -> usize {
        let side = conv_output_side(self.io.frame_size, self.config.conv_layers).unwrap_or(0);
        self.config.conv_channels * side * side
    }

    pub fn embedding_sizes(&self) -> (usize, usize) {
        Self::embedding_dims(&self.config, self.variant)
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        [self.io.channels, self.io.frame_size, self.io.frame_size]
    }

    /// Conv trunk plus heads. Rejects observations of the wrong shape.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, obs: Var, target: bool) -> Result<Encoded, DiffError> {
        let shape = g.shape(obs);
        if shape.len() != 4 || shape[1..] != self.obs_shape() {
            return Err(DiffError::Shape {
                op: "encode",
                shapes: vec![shape.to_vec(), self.obs_shape().to_vec()],
            });
        }
        let enc = if target { &self.target_encoder } else { &self.encoder };
        let conv = enc.conv.forward(g, store, obs)?;
        let z_r = enc.head_r.forward(g, store, conv)?;
        let z_d = match &enc.head_d {
            Some(h) => h.forward(g, store, conv)?,
            None => z_r,
        };
        Ok(Encoded { conv, z_r, z_d })
    }

    /// `[c, 1 − c] = softmax(η_c)`: returns `(c, 1 − c)` as one-element vars.
    pub fn adaptive_weight<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, target: bool) -> Result<(Var, Var), DiffError> {
        let eta = g.param(store, if target { self.target_eta_c } else { self.eta_c });
        let s = g.softmax(eta)?;
        Ok((g.narrow(s, 0, 1)?, g.narrow(s, 1, 1)?))
    }

    /// `[(w_r)·z_r : (w_d)·z_d : a]`, or `[z : a]` with a single embedding.
    pub fn critic_input<T: Real>(&self, g: &mut Graph<T>, enc: &Encoded, weights: &BranchWeights, action: Var) -> Result<Var, DiffError> {
        if self.variant.single_embedding {
            return g.concat(&[enc.z_r, action], 1);
        }
        let r = g.mul(enc.z_r, weights.reward)?;
        let d = g.mul(enc.z_d, weights.dynamics)?;
        g.concat(&[r, d, action], 1)
    }

    pub fn critic_eval<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, input: Var, target: bool) -> Result<(Var, Var), DiffError> {
        let critics = if target { &self.target_critics } else { &self.critics };
        Ok((critics[0].forward(g, store, input)?, critics[1].forward(g, store, input)?))
    }

    /// The actor's input for an encoding (always detached).
    pub fn actor_input<T: Real>(&self, g: &mut Graph<T>, enc: &Encoded) -> Result<Var, DiffError> {
        let x = if self.variant.actor_on_embeddings {
            if self.variant.single_embedding {
                enc.z_r
            } else {
                g.concat(&[enc.z_r, enc.z_d], 1)?
            }
        } else {
            enc.conv
        };
        Ok(g.stop_gradient(x))
    }

    /// Gaussian mean and log-std, the latter squashed into the configured bounds.
    pub fn actor_forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> Result<(Var, Var), DiffError> {
        let out = self.actor.forward(g, store, features)?;
        let a = self.io.action_dim;
        let mean = g.narrow(out, 0, a)?;
        let raw = g.narrow(out, a, a)?;
        let [lo, hi] = self.config.log_std_bounds;
        let t = g.tanh(raw)?;
        let t = g.add_scalar(t, 1.0)?;
        let t = g.scale(t, 0.5 * (hi - lo))?;
        let log_std = g.add_scalar(t, lo)?;
        Ok((mean, log_std))
    }

    /// Reparameterized tanh-squashed sample and its log-density `[N,1]`.
    pub fn actor_sample<T: Real>(&self, g: &mut Graph<T>, mean: Var, log_std: Var, noise: Var) -> Result<(Var, Var), DiffError> {
        let u = g.gaussian_sample(mean, log_std, noise)?;
        let action = g.tanh(u)?;
        let log_gauss = g.gaussian_log_density(u, mean, log_std)?;
        let sq = g.square(action)?;
        let one_minus = g.scale(sq, -1.0)?;
        let one_minus = g.add_scalar(one_minus, 1.0 + SQUASH_EPS)?;
        let log_jac = g.log(one_minus)?;
        let log_jac = g.sum_last(log_jac)?;
        let log_prob = g.sub(log_gauss, log_jac)?;
        Ok((action, log_prob))
    }

    pub fn meta_similarity<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, dynamics: bool, za: Var, zb: Var) -> Result<Var, DiffError> {
        let f = if dynamics { self.f_d.as_ref().unwrap_or(&self.f_r) } else { &self.f_r };
        let x = g.concat(&[za, zb], 1)?;
        f.forward(g, store, x)
    }

    /// Diagonal Gaussian over the next dynamics embedding: `(μ, σ)` with
    /// `log σ` clamped to the configured bounds before exponentiation.
    pub fn dynamics_predict<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z_d: Var, action: Var) -> Result<(Var, Var), DiffError> {
        let (mu, log_sigma) = self.dynamics_predict_log(g, store, z_d, action)?;
        Ok((mu, g.exp(log_sigma)?))
    }

    /// `(μ, log σ)` with `log σ` already clamped.
    pub fn dynamics_predict_log<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z_d: Var, action: Var) -> Result<(Var, Var), DiffError> {
        let x = g.concat(&[z_d, action], 1)?;
        let out = self.dynamics.forward(g, store, x)?;
        let z = self.embedding_sizes().1;
        let mu = g.narrow(out, 0, z)?;
        let log_sigma = g.narrow(out, z, z)?;
        let [lo, hi] = self.config.sigma_bounds;
        Ok((mu, g.clamp(log_sigma, lo.ln(), hi.ln())?))
    }

    /// Detached actor input computed from raw observations, skipping the
    /// heads when the actor reads conv features.
    pub fn actor_features<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, obs: Var) -> Result<Var, DiffError> {
        if self.variant.actor_on_embeddings {
            let enc = self.encode(g, store, obs, false)?;
            return self.actor_input(g, &enc);
        }
        let conv = self.encoder.conv.forward(g, store, obs)?;
        Ok(g.stop_gradient(conv))
    }

    fn ids_of_linear(l: &Linear) -> [ParamId; 2] {
        [l.w, l.b]
    }

    fn ids_of_mlp(m: &Mlp) -> Vec<ParamId> {
        m.layers.iter().flat_map(Self::ids_of_linear).collect()
    }

    pub fn conv_ids(&self, target: bool) -> Vec<ParamId> {
        let enc = if target { &self.target_encoder } else { &self.encoder };
        enc.conv.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }

    /// Heads φ_r and φ_d (φ alone with a single embedding).
    pub fn head_ids(&self, target: bool) -> Vec<ParamId> {
        let enc = if target { &self.target_encoder } else { &self.encoder };
        let mut ids = Self::ids_of_linear(&enc.head_r).to_vec();
        if let Some(h) = &enc.head_d {
            ids.extend(Self::ids_of_linear(h));
        }
        ids
    }

    pub fn encoder_ids(&self, target: bool) -> Vec<ParamId> {
        let mut ids = self.conv_ids(target);
        ids.extend(self.head_ids(target));
        ids
    }

    pub fn meta_ids(&self) -> Vec<ParamId> {
        let mut ids = Self::ids_of_mlp(&self.f_r);
        if let Some(f) = &self.f_d {
            ids.extend(Self::ids_of_mlp(f));
        }
        ids
    }

    pub fn dynamics_ids(&self) -> Vec<ParamId> {
        Self::ids_of_mlp(&self.dynamics)
    }

    pub fn critic_ids(&self, target: bool) -> Vec<ParamId> {
        let c = if target { &self.target_critics } else { &self.critics };
        c.iter().flat_map(Self::ids_of_mlp).collect()
    }

    pub fn actor_ids(&self) -> Vec<ParamId> {
        Self::ids_of_mlp(&self.actor)
    }

    /// (online, target) pairs for the critic soft update.
    pub fn critic_pairs(&self) -> Vec<(ParamId, ParamId)> {
        self.critic_ids(false).into_iter().zip(self.critic_ids(true)).collect()
    }

    /// (online, target) pairs for the encoder soft update, including η_c.
    pub fn encoder_pairs(&self) -> Vec<(ParamId, ParamId)> {
        let mut pairs: Vec<_> = self.encoder_ids(false).into_iter().zip(self.encoder_ids(true)).collect();
        pairs.push((self.eta_c, self.target_eta_c));
        pairs
    }

    /// Parameter counts and tensor shapes of every block, for one observation.
    pub fn shape_audit(&self, store: &ParamStore<f32>) -> Vec<BlockAudit> {
        let count = |ids: &[ParamId]| store.numel(ids);
        let (z_r, z_d) = self.embedding_sizes();
        let a = self.io.action_dim;
        let side = conv_output_side(self.io.frame_size, self.config.conv_layers).unwrap_or(0);
        let critic_in = Self::critic_input_dim(&self.config, a);
        let actor_in = if self.variant.actor_on_embeddings { critic_in - a } else { self.conv_features() };
        let mut blocks = vec![
            BlockAudit {
                name: "conv".into(),
                params: count(&self.conv_ids(false)),
                input: self.obs_shape().to_vec(),
                output: vec![self.config.conv_channels, side, side],
            },
            BlockAudit {
                name: "head_r".into(),
                params: count(&Self::ids_of_linear(&self.encoder.head_r)),
                input: vec![self.conv_features()],
                output: vec![z_r],
            },
        ];
        if let Some(h) = &self.encoder.head_d {
            blocks.push(BlockAudit {
                name: "head_d".into(),
                params: count(&Self::ids_of_linear(h)),
                input: vec![self.conv_features()],
                output: vec![z_d],
            });
        }
        blocks.push(BlockAudit {
            name: "f_r".into(),
            params: count(&Self::ids_of_mlp(&self.f_r)),
            input: vec![2 * z_r],
            output: vec![1],
        });
        if let Some(f) = &self.f_d {
            blocks.push(BlockAudit {
                name: "f_d".into(),
                params: count(&Self::ids_of_mlp(f)),
                input: vec![2 * z_d],
                output: vec![1],
            });
        }
        blocks.extend([
            BlockAudit {
                name: "dynamics".into(),
                params: count(&self.dynamics_ids()),
                input: vec![z_d + a],
                output: vec![2 * z_d],
            },
            BlockAudit {
                name: "critic1".into(),
                params: count(&Self::ids_of_mlp(&self.critics[0])),
                input: vec![critic_in],
                output: vec![1],
            },
            BlockAudit {
                name: "critic2".into(),
                params: count(&Self::ids_of_mlp(&self.critics[1])),
                input: vec![critic_in],
                output: vec![1],
            },
            BlockAudit {
                name: "actor".into(),
                params: count(&self.actor_ids()),
                input: vec![actor_in],
                output: vec![2 * a],
            },
            BlockAudit {
                name: "eta_c".into(),
                params: 2,
                input: vec![],
                output: vec![2],
            },
            BlockAudit {
                name: "log_alpha".into(),
                params: 1,
                input: vec![],
                output: vec![1],
            },
        ]);
        blocks
    }
}

/// Stacks byte observations into a `[N,C,H,W]` tensor scaled to `[0, 1]`,
/// optionally random-cropping each one.
pub fn pixels_to_tensor<T: Real>(obs: &[&[u8]], shape: [usize; 3], crops: Option<(&[CropParams], usize)>) -> Result<Tensor<T>, DiffError> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(obs.len() * numel);
    let mut buf = vec![0u8; numel];
    for (k, o) in obs.iter().enumerate() {
        let src: &[u8] = match crops {
            Some((params, pad)) => {
                apply_crop_into(o, shape, params[k], pad, &mut buf).map_err(|_| DiffError::DataLength {
                    shape: shape.to_vec(),
                    len: o.len(),
                })?;
                &buf
            }
            None => o,
        };
        if src.len() != numel {
            return Err(DiffError::DataLength {
                shape: shape.to_vec(),
                len: src.len(),
            });
        }
        data.extend(src.iter().map(|&b| T::of(b as f64 / 255.0)));
    }
    Tensor::new(&[obs.len(), shape[0], shape[1], shape[2]], data)
}
