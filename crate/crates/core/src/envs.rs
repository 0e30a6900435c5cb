//! Pixel point-mass task with controllable task-irrelevant backgrounds, and a
//! renderer that turns tabular MDP states into images.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHANNELS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("step called on a finished episode; call reset first")]
    StepAfterDone,
    #[error("action must have {expected} finite components, got {got:?}")]
    BadAction { expected: usize, got: Vec<f32> },
    #[error("state index {index} out of range for {n_states} states")]
    BadState { index: usize, n_states: usize },
    #[error("invalid environment config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    None,
    Noise,
    Scroll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundSpec {
    pub mode: BackgroundMode,
    pub split: Split,
    pub seed: u64,
}

impl Default for BackgroundSpec {
    fn default() -> Self {
        Self {
            mode: BackgroundMode::None,
            split: Split::Train,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub frame_size: usize,
    pub frame_stack: usize,
    pub action_repeat: usize,
    pub episode_len: usize,
    pub background: BackgroundSpec,
    /// Width of the Gaussian reward bump around the goal.
    pub reward_sigma: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            frame_size: 48,
            frame_stack: 2,
            action_repeat: 4,
            episode_len: 250,
            background: BackgroundSpec::default(),
            reward_sigma: 0.3,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::BadConfig(m.into()));
        if self.frame_size < 16 {
            return bad("frame_size must be at least 16");
        }
        if self.frame_stack == 0 || self.action_repeat == 0 || self.episode_len == 0 {
            return bad("frame_stack, action_repeat and episode_len must be positive");
        }
        if !(self.reward_sigma > 0.0) {
            return bad("reward_sigma must be positive");
        }
        Ok(())
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        [self.frame_stack * CHANNELS, self.frame_size, self.frame_size]
    }
}

/// Stacked frames, channel-major, stored as bytes; values are `byte / 255`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub shape: [usize; 3],
    pub data: Vec<u8>,
}

impl Observation {
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| b as f32 / 255.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub reward: f32,
    pub done: bool,
}

const GOAL: [f64; 2] = [0.5, 0.5];
const DAMPING: f64 = 0.8;
const ACCEL: f64 = 0.02;
const SHEET_WIDTH_FACTOR: usize = 8;

/// splitmix64 finalizer, used to derive independent seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Background sequence seeds: train seeds are even, eval seeds odd, so the two
/// splits never share a generator stream.
fn background_seed(spec: &BackgroundSpec, episode_seed: u64) -> u64 {
    let base = mix(mix(spec.seed) ^ episode_seed) & !1;
    match spec.split {
        Split::Train => base,
        Split::Eval => base | 1,
    }
}

/// A procedurally generated texture sheet, wider than the frame, scrolled
/// horizontally one pixel per physics tick.
#[derive(Debug, Clone)]
struct Sheet {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Sheet {
    fn generate(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0u8; CHANNELS * height * width];
        // Stripes of random orientation, frequency and colour plus a few blobs.
        let stripes: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let freq = rng.random_range(0.05..0.5);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let colour = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
                (angle, freq, phase, colour)
            })
            .collect();
        let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..width / 6)
            .map(|_| {
                let y = rng.random_range(0.0..height as f64);
                let x = rng.random_range(0.0..width as f64);
                let r = rng.random_range(2.0..height as f64 / 4.0);
                (y, x, r, [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            })
            .collect();
        for y in 0..height {
            for x in 0..width {
                let mut rgb = [0.0f64; 3];
                for &(angle, freq, phase, colour) in &stripes {
                    let t = (x as f64 * angle.cos() + y as f64 * angle.sin()) * freq + phase;
                    let s = 0.5 + 0.5 * t.sin();
                    for k in 0..3 {
                        rgb[k] += 0.3 * s * colour[k];
                    }
                }
                for &(by, bx, r, colour) in &blobs {
                    let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                    if d2 < r * r {
                        for k in 0..3 {
                            rgb[k] = 0.5 * rgb[k] + 0.5 * colour[k];
                        }
                    }
                }
                for k in 0..3 {
                    data[(k * height + y) * width + x] = (rgb[k].clamp(0.0, 1.0) * 200.0) as u8;
                }
            }
        }
        Self { height, width, data }
    }

    fn window(&self, offset: usize, size: usize, out: &mut [u8]) {
        for k in 0..CHANNELS {
            for y in 0..size.min(self.height) {
                for x in 0..size {
                    out[(k * size + y) * size + x] = self.data[(k * self.height + y) * self.width + (x + offset) % self.width];
                }
            }
        }
    }
}

/// Point mass in `[−1, 1]²` with damped velocity, steered toward a fixed goal.
#[derive(Debug, Clone)]
pub struct PointMass {
    config: EnvConfig,
    pos: [f64; 2],
    vel: [f64; 2],
    steps: usize,
    ticks: usize,
    done: bool,
    frames: VecDeque<Vec<u8>>,
    sheet: Option<Sheet>,
    sheet_offset: usize,
    noise_rng: ChaCha8Rng,
}

impl PointMass {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        Ok(Self {
            config,
            pos: [0.0; 2],
            vel: [0.0; 2],
            steps: 0,
            ticks: 0,
            done: true,
            frames: VecDeque::new(),
            sheet: None,
            sheet_offset: 0,
            noise_rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    pub fn obs_shape(&self) -> [usize; 3] {
        self.config.obs_shape()
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn goal(&self) -> [f64; 2] {
        GOAL
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Places the agent at `pos` at rest (keeps the background state).
    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
    }

    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed));
        self.pos = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
        self.vel = [0.0; 2];
        self.steps = 0;
        self.ticks = 0;
        self.done = false;
        let bg_seed = background_seed(&self.config.background, seed);
        let size = self.config.frame_size;
        self.noise_rng = ChaCha8Rng::seed_from_u64(bg_seed);
        self.sheet = match self.config.background.mode {
            BackgroundMode::Scroll => Some(Sheet::generate(size, size * SHEET_WIDTH_FACTOR, bg_seed)),
            _ => None,
        };
        self.sheet_offset = (bg_seed as usize) % (size * SHEET_WIDTH_FACTOR);
        let frame = self.render_frame();
        self.frames.clear();
        for _ in 0..self.config.frame_stack {
            self.frames.push_back(frame.clone());
        }
        self.observation()
    }

    /// Per-tick reward `exp(−‖pos − goal‖² / σ²)` at the current position.
    pub fn tick_reward(&self) -> f64 {
        let d2 = (self.pos[0] - GOAL[0]).powi(2) + (self.pos[1] - GOAL[1]).powi(2);
        (-d2 / self.config.reward_sigma.powi(2)).exp()
    }

    pub fn step(&mut self, action: &[f32]) -> Result<Step, EnvError> {
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        if action.len() != 2 || action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::BadAction {
                expected: 2,
                got: action.to_vec(),
            });
        }
        let a = [action[0].clamp(-1.0, 1.0) as f64, action[1].clamp(-1.0, 1.0) as f64];
        let mut reward = 0.0;
        for _ in 0..self.config.action_repeat {
            for k in 0..2 {
                self.vel[k] = DAMPING * self.vel[k] + ACCEL * a[k];
                self.pos[k] += self.vel[k];
                if self.pos[k].abs() > 1.0 {
                    self.pos[k] = self.pos[k].clamp(-1.0, 1.0);
                    self.vel[k] = 0.0;
                }
            }
            self.ticks += 1;
            self.sheet_offset += 1;
            reward += self.tick_reward();
        }
        self.steps += 1;
        self.done = self.steps >= self.config.episode_len;
        let frame = self.render_frame();
        self.frames.pop_front();
        self.frames.push_back(frame);
        Ok(Step {
            obs: self.observation(),
            reward: reward as f32,
            done: self.done,
        })
    }

    fn observation(&self) -> Observation {
        Observation {
            shape: self.obs_shape(),
            data: self.frames.iter().flatten().copied().collect(),
        }
    }

    /// The background layer of the current frame (before the agent is drawn).
    pub fn background_frame(&mut self) -> Vec<u8> {
        let size = self.config.frame_size;
        let mut out = vec![0u8; CHANNELS * size * size];
        match self.config.background.mode {
            BackgroundMode::None => {}
            BackgroundMode::Noise => out.iter_mut().for_each(|v| *v = self.noise_rng.random_range(0..=200)),
            BackgroundMode::Scroll => {
                let sheet = self.sheet.as_ref().expect("scroll sheet after reset");
                sheet.window(self.sheet_offset % sheet.width, size, &mut out);
            }
        }
        out
    }

    fn render_frame(&mut self) -> Vec<u8> {
        let size = self.config.frame_size;
        let mut frame = self.background_frame();
        let to_px = |v: f64| (((v + 1.0) / 2.0) * (size - 1) as f64).round() as i64;
        let paint = |cy: i64, cx: i64, r: i64, rgb: [u8; 3], frame: &mut [u8]| {
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    if (0..size as i64).contains(&y) && (0..size as i64).contains(&x) {
                        for k in 0..3 {
                            frame[(k * size + y as usize) * size + x as usize] = rgb[k];
                        }
                    }
                }
            }
        };
        let r = (size / 24).max(1) as i64;
        paint(to_px(GOAL[1]), to_px(GOAL[0]), 1, [0, 255, 0], &mut frame);
        paint(to_px(self.pos[1]), to_px(self.pos[0]), r, [255, 0, 0], &mut frame);
        frame
    }
}

/// Distractor overlay for [`render_tabular`].
pub enum TabularBackground<'a, R: Rng> {
    None,
    Noise(&'a mut R),
}

/// Side length (in cells) of the glyph grid used by [`render_tabular`].
const GLYPH_CELLS: usize = 3;

/// Renders tabular state `index` as a single `3×size×size` frame: the binary
/// code of the index drawn as a 3×3 block glyph in the centre, optionally over
/// random noise that never touches the glyph region.
pub fn render_tabular<R: Rng>(index: usize, n_states: usize, size: usize, background: TabularBackground<'_, R>) -> Result<Observation, EnvError> {
    if index >= n_states {
        return Err(EnvError::BadState { index, n_states });
    }
    if n_states > 1 << (GLYPH_CELLS * GLYPH_CELLS) || size < 2 * GLYPH_CELLS {
        return Err(EnvError::BadConfig(format!("cannot render {n_states} states at {size}px")));
    }
    let cell = size / (2 * GLYPH_CELLS);
    let origin = (size - cell * GLYPH_CELLS) / 2;
    let in_glyph = |y: usize, x: usize| (origin..origin + cell * GLYPH_CELLS).contains(&y) && (origin..origin + cell * GLYPH_CELLS).contains(&x);
    let mut data = vec![0u8; CHANNELS * size * size];
    if let TabularBackground::Noise(rng) = background {
        for k in 0..CHANNELS {
            for y in 0..size {
                for x in 0..size {
                    if !in_glyph(y, x) {
                        data[(k * size + y) * size + x] = rng.random_range(0..=255);
                    }
                }
            }
        }
    }
    for y in 0..size {
        for x in 0..size {
            if !in_glyph(y, x) {
                continue;
            }
            let bit = ((y - origin) / cell) * GLYPH_CELLS + (x - origin) / cell;
            let on = (index >> bit) & 1 == 1;
            // Channel-specific shades keep the glyph from being a flat mask.
            for k in 0..CHANNELS {
                data[(k * size + y) * size + x] = if on { 255 - 40 * k as u8 } else { 0 };
            }
        }
    }
    Ok(Observation {
        shape: [CHANNELS, size, size],
        data,
    })
}

/// Pixels belonging to the glyph region of [`render_tabular`].
pub fn tabular_glyph_mask(size: usize) -> Vec<bool> {
    let cell = size / (2 * GLYPH_CELLS);
    let origin = (size - cell * GLYPH_CELLS) / 2;
    let span = origin..origin + cell * GLYPH_CELLS;
    (0..CHANNELS * size * size)
        .map(|i| {
            let (y, x) = ((i / size) % size, i % size);
            span.contains(&y) && span.contains(&x)
        })
        .collect()
}
