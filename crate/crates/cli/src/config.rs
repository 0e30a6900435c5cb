//! Run configurations: JSON documents with every field defaulted and unknown
//! keys rejected. `AMBS_SEED` overrides the configured seed.

use std::fs;
use std::path::{Path, PathBuf};

use ambs_core::agent::{FitConfig, TrainConfig};
use ambs_core::envs::EnvConfig;
use ambs_core::nets::{conv_output_side, IoShape, NetConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "AMBS_SEED";

/// Everything `ambs train` needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub env: EnvConfig,
    pub net: NetConfig,
    /// Evaluate every this many agent steps (0: only at the end).
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Checkpoint every this many agent steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            train: TrainConfig::default(),
            env: EnvConfig::default(),
            net: NetConfig::default(),
            eval_every: 2500,
            eval_episodes: 5,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn io(&self) -> IoShape {
        IoShape {
            channels: self.env.obs_shape()[0],
            frame_size: self.env.frame_size,
            action_dim: 2,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        self.env.validate().map_err(|e| CliError::Config(format!("env: {e}")))?;
        if conv_output_side(self.env.frame_size, self.net.conv_layers).is_none() {
            return Err(CliError::Config(format!(
                "net.conv_layers = {} leaves no spatial extent at env.frame_size = {}",
                self.net.conv_layers, self.env.frame_size
            )));
        }
        let [lo, hi] = self.net.log_std_bounds;
        let [s_lo, s_hi] = self.net.sigma_bounds;
        if !(lo < hi) || !(0.0 < s_lo && s_lo < s_hi) {
            return Err(CliError::Config("net.log_std_bounds / net.sigma_bounds must be increasing (sigma bounds positive)".into()));
        }
        if self.net.conv_channels == 0 || self.net.z_r == 0 || self.net.z_d == 0 {
            return Err(CliError::Config("net.conv_channels, net.z_r and net.z_d must be positive".into()));
        }
        if self.eval_episodes == 0 {
            return Err(CliError::Config("eval_episodes must be positive".into()));
        }
        Ok(())
    }
}

/// `ambs fit-oracle` settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitRunConfig {
    pub out_dir: PathBuf,
    /// One random MDP (and policy) per seed.
    pub seeds: Vec<u64>,
    pub n_states: usize,
    pub n_actions: usize,
    /// When set, each state reaches at most this many successor states.
    pub max_successors: Option<usize>,
    /// Dynamics weight of the exact metric being regressed.
    pub c: f64,
    /// Steps averaged for the smoothed final loss.
    pub smoothing_window: usize,
    pub fit: FitConfig,
}

impl Default for FitRunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/fit_oracle"),
            seeds: vec![1, 2, 3],
            // Exact metrics on a handful of states embed in L1 almost exactly;
            // 32 states make the comparison informative.
            n_states: 32,
            n_actions: 2,
            max_successors: None,
            c: 0.5,
            smoothing_window: 100,
            fit: FitConfig::default(),
        }
    }
}

impl FitRunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() || self.n_states == 0 || self.n_actions == 0 || self.fit.steps == 0 || self.smoothing_window == 0 {
            return Err(CliError::Config("seeds, n_states, n_actions, fit.steps and smoothing_window must be non-empty/positive".into()));
        }
        if !(self.c > 0.0 && self.c < 1.0) {
            return Err(CliError::Config(format!("c must lie in (0, 1), got {}", self.c)));
        }
        if !(self.fit.lr > 0.0) {
            return Err(CliError::Config("fit.lr must be positive".into()));
        }
        if conv_output_side(self.fit.frame_size, self.fit.net.conv_layers).is_none() || self.fit.frame_size < 6 {
            return Err(CliError::Config(format!("fit.frame_size = {} is too small for the encoder", self.fit.frame_size)));
        }
        Ok(())
    }
}

/// Reads a JSON config, naming the offending field on failure.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Parses an `AMBS_SEED` value (`None` when unset).
pub fn seed_override(value: Option<&str>) -> Result<Option<u64>, CliError> {
    value
        .map(|v| v.trim().parse::<u64>().map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))))
        .transpose()
}

/// Loads, applies the seed override and validates a training config.
pub fn load_run_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut config: RunConfig = read_json(path)?;
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// Pretty JSON with a trailing newline; field order is fixed by the types,
/// so the output is byte-reproducible.
pub fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}
