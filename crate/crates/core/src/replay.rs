//! Ring-buffer replay memory with the shuffled-pair sampling used for the
//! pairwise similarity targets.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{load_tensors, save_tensors, DiffError, Tensor};
use crate::envs::Observation;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("cannot sample a batch of {batch} from {size} stored transitions")]
    NotEnoughData { batch: usize, size: usize },
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("malformed transition: {0}")]
    Malformed(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Tensor(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub action: Vec<f32>,
    pub reward: f32,
    pub next_obs: Observation,
    pub done: bool,
}

impl Transition {
    fn check(&self) -> Result<(), ReplayError> {
        let numel = |o: &Observation| o.shape.iter().product::<usize>();
        if self.obs.shape != self.next_obs.shape || numel(&self.obs) != self.obs.data.len() || numel(&self.next_obs) != self.next_obs.data.len() {
            return Err(ReplayError::Malformed("observation shapes disagree with data".into()));
        }
        if self.action.iter().any(|a| !(-1.0..=1.0).contains(a)) || !self.reward.is_finite() {
            return Err(ReplayError::Malformed("action outside [-1, 1] or non-finite reward".into()));
        }
        Ok(())
    }
}

/// A minibatch and its shuffled partner: `j[k]` is `i[perm[k]]`.
#[derive(Debug, Clone)]
pub struct PairBatch<'a> {
    pub i: Vec<&'a Transition>,
    pub j: Vec<&'a Transition>,
    pub perm: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    capacity: usize,
    size: usize,
    cursor: usize,
    obs_shape: [usize; 3],
    action_dim: usize,
}

impl ReplayBuffer {
    /// Storage grows on demand, so a large capacity costs nothing up front.
    pub fn new(capacity: usize) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.items.get(index)
    }

    pub fn push(&mut self, t: Transition) -> Result<(), ReplayError> {
        t.check()?;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Transition>, ReplayError> {
        if batch == 0 {
            return Err(ReplayError::EmptyBatch);
        }
        if batch > self.items.len() {
            return Err(ReplayError::NotEnoughData {
                batch,
                size: self.items.len(),
            });
        }
        Ok((0..batch).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }

    /// Uniform batch with replacement, paired against a uniform random
    /// permutation of itself (self-pairs allowed).
    pub fn sample_pair_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<PairBatch<'_>, ReplayError> {
        let i = self.sample(batch, rng)?;
        let mut perm: Vec<usize> = (0..batch).collect();
        perm.shuffle(rng);
        let j = perm.iter().map(|&k| i[k]).collect();
        Ok(PairBatch { i, j, perm })
    }

    /// Writes `buffer.ambs` (tensor map) and `manifest.json` into `dir`.
    pub fn save_snapshot(&self, dir: &Path) -> Result<(), ReplayError> {
        fs::create_dir_all(dir)?;
        let first = self.items.first().ok_or_else(|| ReplayError::Snapshot("buffer is empty".into()))?;
        let manifest = Manifest {
            capacity: self.capacity,
            size: self.items.len(),
            cursor: self.cursor,
            obs_shape: first.obs.shape,
            action_dim: first.action.len(),
        };
        let n = self.items.len();
        let obs_numel: usize = manifest.obs_shape.iter().product();
        let gather = |f: &dyn Fn(&Transition) -> Vec<f32>, shape: Vec<usize>| -> Result<Tensor<f32>, DiffError> { Tensor::new(&shape, self.items.iter().flat_map(f).collect()) };
        let bytes = |o: &Observation| o.data.iter().map(|&b| b as f32).collect::<Vec<f32>>();
        let tensors = vec![
            ("obs".to_string(), gather(&|t| bytes(&t.obs), vec![n, obs_numel])?),
            ("next_obs".to_string(), gather(&|t| bytes(&t.next_obs), vec![n, obs_numel])?),
            ("action".to_string(), gather(&|t| t.action.clone(), vec![n, manifest.action_dim])?),
            ("reward".to_string(), gather(&|t| vec![t.reward], vec![n])?),
            ("done".to_string(), gather(&|t| vec![t.done as u8 as f32], vec![n])?),
        ];
        save_tensors(&dir.join("buffer.ambs"), &tensors)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_snapshot(dir: &Path) -> Result<Self, ReplayError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let tensors = load_tensors(&dir.join("buffer.ambs"))?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| ReplayError::Snapshot(format!("missing tensor {name}")))
        };
        let (obs, next_obs, action, reward, done) = (find("obs")?, find("next_obs")?, find("action")?, find("reward")?, find("done")?);
        let n = manifest.size;
        let obs_numel: usize = manifest.obs_shape.iter().product();
        if obs.shape() != [n, obs_numel] || next_obs.shape() != [n, obs_numel] || action.shape() != [n, manifest.action_dim] || reward.numel() != n || done.numel() != n {
            return Err(ReplayError::Snapshot("tensor shapes disagree with manifest".into()));
        }
        let to_obs = |t: &Tensor<f32>, k: usize| Observation {
            shape: manifest.obs_shape,
            data: t.data()[k * obs_numel..(k + 1) * obs_numel].iter().map(|&v| v as u8).collect(),
        };
        let mut buffer = Self::new(manifest.capacity)?;
        for k in 0..n {
            buffer.items.push(Transition {
                obs: to_obs(obs, k),
                action: action.data()[k * manifest.action_dim..(k + 1) * manifest.action_dim].to_vec(),
                reward: reward.data()[k],
                next_obs: to_obs(next_obs, k),
                done: done.data()[k] != 0.0,
            });
        }
        buffer.cursor = manifest.cursor;
        Ok(buffer)
    }
}
