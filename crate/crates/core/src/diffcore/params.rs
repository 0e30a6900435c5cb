use std::collections::HashMap;

use super::{DiffError, Real, Tensor};

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors. Networks hold [`ParamId`]s into a store, so the
/// same network description can be evaluated against an `f32` store during
/// training and an `f64` copy during gradient checking.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId, DiffError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// All parameters whose name starts with `prefix`, in registration order.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids().filter(|&id| self.names[id.0].starts_with(prefix)).collect()
    }

    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.values[id.0].numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copies `src` values into `dst` for each pair.
    pub fn copy_values(&mut self, pairs: &[(ParamId, ParamId)]) {
        for &(src, dst) in pairs {
            let value = self.values[src.0].clone();
            self.values[dst.0] = value;
        }
    }

    /// `target ← tau·online + (1−tau)·target` for each `(online, target)` pair.
    pub fn soft_update(&mut self, pairs: &[(ParamId, ParamId)], tau: f64) -> Result<(), DiffError> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(DiffError::InvalidTau(tau));
        }
        for &(online, target) in pairs {
            if self.values[online.0].shape() != self.values[target.0].shape() {
                return Err(DiffError::Shape {
                    op: "soft_update",
                    shapes: vec![
                        self.values[online.0].shape().to_vec(),
                        self.values[target.0].shape().to_vec(),
                    ],
                });
            }
            if tau == 1.0 {
                let value = self.values[online.0].clone();
                self.values[target.0] = value;
                continue;
            }
            if tau == 0.0 {
                continue;
            }
            let t = T::of(tau);
            let keep = T::of(1.0 - tau);
            let src = self.values[online.0].data().to_vec();
            for (d, s) in self.values[target.0].data_mut().iter_mut().zip(src) {
                *d = t * s + keep * *d;
            }
        }
        Ok(())
    }
}
