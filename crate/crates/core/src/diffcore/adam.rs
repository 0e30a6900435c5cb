use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{DiffError, Gradients, ParamId, ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN/inf; nothing was touched.
    SkippedNonFinite,
}

/// Adam over a fixed group of parameters, with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    m: HashMap<ParamId, Vec<T>>,
    v: HashMap<ParamId, Vec<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: Vec<ParamId>, store: &ParamStore<T>) -> Result<Self, DiffError> {
        if !(config.lr > 0.0) {
            return Err(DiffError::InvalidLearningRate(config.lr));
        }
        let zeros = |id: &ParamId| (*id, vec![T::zero(); store.get(*id).numel()]);
        Ok(Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            params,
            step: 0,
        })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[T]> {
        self.m.get(&id).map(Vec::as_slice)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[T]> {
        self.v.get(&id).map(Vec::as_slice)
    }

    /// One update of the group from `grads`; absent gradients count as zero.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> StepOutcome {
        let view: Vec<Option<&Tensor<T>>> = self.params.iter().map(|&id| grads.wrt_param(id)).collect();
        self.step_with(store, &view)
    }

    /// Same as [`Adam::step`] but with explicit per-parameter gradients in
    /// `params()` order.
    pub fn step_with(&mut self, store: &mut ParamStore<T>, grads: &[Option<&Tensor<T>>]) -> StepOutcome {
        assert_eq!(grads.len(), self.params.len(), "one gradient slot per parameter");
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return StepOutcome::SkippedNonFinite;
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::of(c.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        for (&id, g) in self.params.iter().zip(grads) {
            let m = self.m.get_mut(&id).expect("moment buffer");
            let v = self.v.get_mut(&id).expect("moment buffer");
            let p = store.get_mut(id).data_mut();
            assert_eq!(p.len(), m.len(), "parameter {} changed shape", id.index());
            for i in 0..p.len() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
        StepOutcome::Applied
    }
}
