//! Subcommand implementations. Each returns a serializable report; the
//! binary prints it and maps errors to exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use ambs_core::agent::{evaluate, fit_to_oracle, Agent, Collector, EvalStats, FitVariant, LossBundle};
use ambs_core::bisim::{bisim_fixed_point, check_discount_bound, check_value_bound, contraction_bound, emit_supervision, DiscountBoundReport, TabularMdp, TabularPolicy};
use ambs_core::diffcore::Mutation;
use ambs_core::envs::EnvConfig;
use ambs_core::losses::check::{check_all_losses, THRESHOLD};
use ambs_core::replay::ReplayBuffer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{to_json, FitRunConfig, RunConfig};
use crate::CliError;

/// Bumped whenever the metrics columns change.
pub const METRICS_SCHEMA_VERSION: u32 = 1;
/// Consecutive steps with a skipped update that abort a run.
pub const NAN_STORM: u32 = 10;
/// Offset separating evaluation episode seeds from training episode seeds.
const EVAL_SEED_OFFSET: u64 = 1 << 40;

/// One row of `metrics.csv`, written after every agent step. Loss columns
/// are empty before training starts; `c` and `alpha` are always present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub env_steps: u64,
    pub episode_return: Option<f64>,
    pub repr_loss: Option<f64>,
    pub reward_term: Option<f64>,
    pub dynamics_term: Option<f64>,
    pub q_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub alpha_loss: Option<f64>,
    pub dynamics_loss: Option<f64>,
    pub alpha: f64,
    pub c: f64,
    pub norm_r: Option<f64>,
    pub norm_d: Option<f64>,
    pub skipped: String,
}

impl MetricsRow {
    fn new(step: u64, env_steps: u64, episode_return: Option<f64>, bundle: Option<&LossBundle>, agent: &Agent) -> Self {
        Self {
            step,
            env_steps,
            episode_return,
            repr_loss: bundle.map(|b| b.repr_loss),
            reward_term: bundle.and_then(|b| b.reward_term),
            dynamics_term: bundle.and_then(|b| b.dynamics_term),
            q_loss: bundle.map(|b| b.q_loss),
            actor_loss: bundle.and_then(|b| b.actor_loss),
            alpha_loss: bundle.and_then(|b| b.alpha_loss),
            dynamics_loss: bundle.map(|b| b.dynamics_loss),
            alpha: bundle.map_or_else(|| agent.alpha(), |b| b.alpha),
            c: bundle.map_or_else(|| agent.c(), |b| b.c),
            norm_r: bundle.and_then(|b| b.norm_r),
            norm_d: bundle.and_then(|b| b.norm_d),
            skipped: bundle.map(|b| b.skipped.clone()).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub env_steps: u64,
    #[serde(flatten)]
    pub stats: EvalStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub steps: u64,
    pub env_steps: u64,
    pub train_steps: u64,
    pub final_eval: EvalPoint,
}

fn save_checkpoint(agent: &Agent, env: &EnvConfig, dir: &Path) -> Result<(), CliError> {
    agent.save_checkpoint(dir)?;
    fs::write(dir.join("env.json"), to_json(env)?)?;
    Ok(())
}

fn eval_point(agent: &Agent, config: &RunConfig, step: u64) -> Result<EvalPoint, CliError> {
    let stats = evaluate(agent, &config.env, config.eval_episodes, config.train.seed.wrapping_add(EVAL_SEED_OFFSET))?;
    Ok(EvalPoint {
        step,
        env_steps: step * config.env.action_repeat as u64,
        stats,
    })
}

/// Collect/train loop: one environment step then (after warmup) one gradient
/// step per iteration. Writes the resolved config, `metrics.csv`,
/// `evals/step_*.json`, `final_eval.json` and checkpoints into `out_dir`.
pub fn train(config: &RunConfig) -> Result<TrainSummary, CliError> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out.join("evals"))?;
    fs::write(out.join("config.resolved.json"), to_json(config)?)?;
    let mut metrics = csv::Writer::from_path(out.join("metrics.csv"))?;

    let t = &config.train;
    let mut agent = Agent::new(t.clone(), config.net.clone(), config.io())?;
    let mut collector = Collector::new(config.env.clone(), t.seed)?;
    let mut buffer = ReplayBuffer::new(t.buffer_capacity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(1);
    let mut recent: Vec<MetricsRow> = Vec::new();

    for step in 1..=t.total_steps {
        let collected = collector.collect_step(&agent, &mut buffer, &mut rng, t.warmup_steps)?;
        let bundle = if step > t.warmup_steps && buffer.len() >= t.batch_size {
            Some(agent.train_step(&buffer, &mut rng)?)
        } else {
            None
        };
        let env_steps = step * config.env.action_repeat as u64;
        let row = MetricsRow::new(step, env_steps, collected.episode_return, bundle.as_ref(), &agent);
        metrics.serialize(&row)?;
        recent.push(row);
        if recent.len() > NAN_STORM as usize {
            recent.remove(0);
        }
        if agent.consecutive_skips() >= NAN_STORM {
            metrics.flush()?;
            fs::write(out.join("nan_dump.json"), to_json(&recent)?)?;
            save_checkpoint(&agent, &config.env, &out.join("checkpoints").join("nan_dump"))?;
            return Err(CliError::Numerical(format!(
                "{NAN_STORM} consecutive training steps skipped an update (last at step {step}); diagnostics in {}",
                out.join("nan_dump.json").display()
            )));
        }
        if config.eval_every > 0 && step % config.eval_every == 0 && step < t.total_steps {
            let point = eval_point(&agent, config, step)?;
            fs::write(out.join("evals").join(format!("step_{step:07}.json")), to_json(&point)?)?;
        }
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step < t.total_steps {
            save_checkpoint(&agent, &config.env, &out.join("checkpoints").join(format!("step_{step:07}")))?;
        }
    }
    metrics.flush()?;
    let final_eval = eval_point(&agent, config, t.total_steps)?;
    fs::write(out.join("final_eval.json"), to_json(&final_eval)?)?;
    save_checkpoint(&agent, &config.env, &out.join("checkpoints").join("final"))?;
    Ok(TrainSummary {
        out_dir: out.clone(),
        steps: t.total_steps,
        env_steps: t.total_steps * config.env.action_repeat as u64,
        train_steps: agent.step(),
        final_eval,
    })
}

/// Evaluates a checkpoint written by [`train`].
pub fn eval(checkpoint: &Path, episodes: usize, seed: u64) -> Result<EvalStats, CliError> {
    let env: EnvConfig = crate::config::read_json(&checkpoint.join("env.json"))?;
    let agent = Agent::load_checkpoint(checkpoint).map_err(|e| CliError::Config(format!("cannot load checkpoint {}: {e}", checkpoint.display())))?;
    if episodes == 0 {
        return Err(CliError::Config("--episodes must be positive".into()));
    }
    Ok(evaluate(&agent, &env, episodes, seed)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct CCheck {
    pub c: f64,
    pub iterations: usize,
    pub contraction_bound: usize,
    pub value_bound_max_violation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceReport {
    pub index: usize,
    pub n_states: usize,
    pub gamma: f64,
    pub c_checks: Vec<CCheck>,
    pub discount: DiscountBoundReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub index: usize,
    pub kind: String,
    pub detail: String,
    pub mdp: TabularMdp,
    pub policy: TabularPolicy,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub seed: u64,
    pub instances: usize,
    pub tolerance: f64,
    pub c_grid: Vec<f64>,
    pub max_value_violation: f64,
    pub max_discount_violation: f64,
    /// The two-absorbing-state case, where the discount bound is tight.
    pub absorbing: DiscountBoundReport,
    pub absorbing_gap: f64,
    pub violations: Vec<Violation>,
    pub passed: bool,
    pub per_instance: Vec<InstanceReport>,
}

pub const ORACLE_TOLERANCE: f64 = 1e-8;
const FIXED_POINT_TOL: f64 = 1e-9;

/// The tabular instances of the oracle sweep: `instances` random MDPs with
/// 2–8 states cycling, plus a single-state MDP.
pub fn oracle_instances(instances: usize, seed: u64) -> Vec<(TabularMdp, TabularPolicy)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(TabularMdp, TabularPolicy)> = (0..instances)
        .map(|k| {
            let n = 2 + k % 7;
            let gamma = rng.random_range(0.0..0.95);
            let mdp = TabularMdp::random(n, 2, gamma, &mut rng);
            let pi = TabularPolicy::random(n, 2, &mut rng);
            (mdp, pi)
        })
        .collect();
    let single = TabularMdp::random(1, 2, 0.9, &mut rng);
    out.push((single, TabularPolicy::random(1, 2, &mut rng)));
    out
}

/// Fixed points, the c-weighted value bound over a c-grid, and the
/// discount-sensitivity bound over one random `(γ1, γ2)` pair per instance.
pub fn oracle_check(instances: usize, seed: u64) -> Result<OracleReport, CliError> {
    let c_grid: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD15C_0047);
    let mut report = OracleReport {
        seed,
        instances,
        tolerance: ORACLE_TOLERANCE,
        c_grid: c_grid.clone(),
        max_value_violation: f64::NEG_INFINITY,
        max_discount_violation: f64::NEG_INFINITY,
        absorbing: check_discount_bound(&TabularMdp::absorbing_pair(0.9), &TabularPolicy::uniform(2, 1), 0.5, 0.9)?,
        absorbing_gap: 0.0,
        violations: Vec::new(),
        passed: false,
        per_instance: Vec::new(),
    };
    report.absorbing_gap = (report.absorbing.max_lhs - report.absorbing.bound).abs();
    for (index, (mdp, pi)) in oracle_instances(instances, seed).into_iter().enumerate() {
        let violation = |kind: &str, detail: String| Violation {
            index,
            kind: kind.into(),
            detail,
            mdp: mdp.clone(),
            policy: pi.clone(),
        };
        let mut c_checks = Vec::new();
        for &c in &c_grid {
            let fp = bisim_fixed_point(&mdp, &pi, c, FIXED_POINT_TOL)?;
            let bound = contraction_bound(c, FIXED_POINT_TOL);
            let value = check_value_bound(&mdp, &pi, c, mdp.gamma, FIXED_POINT_TOL)?;
            report.max_value_violation = report.max_value_violation.max(value.max_violation);
            if fp.iterations > bound {
                report.violations.push(violation("iterations", format!("c = {c}: {} iterations > contraction bound {bound}", fp.iterations)));
            }
            if value.max_violation > ORACLE_TOLERANCE {
                report.violations.push(violation("value_bound", format!("c = {c}, γ = {}: violation {}", mdp.gamma, value.max_violation)));
            }
            c_checks.push(CCheck {
                c,
                iterations: fp.iterations,
                contraction_bound: bound,
                value_bound_max_violation: value.max_violation,
            });
        }
        let g1 = rng.random_range(0.0..0.95);
        let g2 = rng.random_range(g1..0.99);
        let discount = check_discount_bound(&mdp, &pi, g1, g2)?;
        report.max_discount_violation = report.max_discount_violation.max(discount.max_violation);
        if discount.max_violation > ORACLE_TOLERANCE {
            report.violations.push(violation("discount_bound", format!("γ1 = {g1}, γ2 = {g2}: violation {}", discount.max_violation)));
        }
        report.per_instance.push(InstanceReport {
            index,
            n_states: mdp.n_states,
            gamma: mdp.gamma,
            c_checks,
            discount,
        });
    }
    if report.absorbing_gap > 1e-9 {
        let (mdp, policy) = (TabularMdp::absorbing_pair(0.9), TabularPolicy::uniform(2, 1));
        report.violations.push(Violation {
            index: usize::MAX,
            kind: "absorbing_equality".into(),
            detail: format!("bound not attained: gap {}", report.absorbing_gap),
            mdp,
            policy,
        });
    }
    report.passed = report.violations.is_empty();
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckEntry {
    pub loss: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub coordinates_checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub fault: Option<String>,
    pub entries: Vec<GradcheckEntry>,
    pub passed: bool,
}

impl GradcheckReport {
    /// Human-readable names of the failing checks.
    pub fn failures(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| match &e.worst {
                Some((param, index)) => format!("{} (seed {}): rel. error {:.3e} at {param}[{index}]", e.loss, e.seed, e.max_rel_error),
                None => format!("{} (seed {}): non-finite gradient", e.loss, e.seed),
            })
            .collect()
    }
}

/// Central-difference checks of all six losses on small random instances.
pub fn gradcheck(seeds: &[u64], fault: Option<Mutation>) -> Result<GradcheckReport, CliError> {
    let mut entries = Vec::new();
    for &seed in seeds {
        for check in check_all_losses(seed, fault)? {
            entries.push(GradcheckEntry {
                loss: check.loss.to_string(),
                seed,
                max_rel_error: check.report.max_rel_error,
                worst: check.report.non_finite.clone().or(check.report.worst.clone()),
                coordinates_checked: check.report.coordinates_checked,
                passed: check.passed,
            });
        }
    }
    let passed = entries.iter().all(|e| e.passed);
    Ok(GradcheckReport {
        threshold: THRESHOLD,
        fault: fault.map(|m| format!("{m:?}")),
        entries,
        passed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSeedResult {
    pub seed: u64,
    pub meta_learner_final: f64,
    pub l1_distance_final: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub smoothing_window: usize,
    pub seeds: Vec<FitSeedResult>,
    pub meta_learner_mean: f64,
    pub l1_distance_mean: f64,
    /// `meta_learner_mean / l1_distance_mean`.
    pub ratio: f64,
}

#[derive(Debug, Serialize)]
struct CurveRow<'a> {
    seed: u64,
    variant: &'a str,
    step: usize,
    train_loss: f64,
    distance_error: f64,
}

/// Fits both similarity forms to the exact metric of one random MDP per
/// seed; writes `curves.csv` and `report.json`.
pub fn fit_oracle(config: &FitRunConfig) -> Result<FitReport, CliError> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)?;
    fs::write(config.out_dir.join("config.resolved.json"), to_json(config)?)?;
    let mut curves = csv::Writer::from_path(config.out_dir.join("curves.csv"))?;
    let mut seeds = Vec::new();
    for &seed in &config.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = match config.max_successors {
            Some(k) => TabularMdp::random_sparse(config.n_states, config.n_actions, 0.9, k, &mut rng),
            None => TabularMdp::random(config.n_states, config.n_actions, 0.9, &mut rng),
        };
        let pi = TabularPolicy::random(config.n_states, config.n_actions, &mut rng);
        let fp = bisim_fixed_point(&mdp, &pi, config.c, FIXED_POINT_TOL)?;
        let records = emit_supervision(&mdp, &pi, config.c, &fp.metric)?;
        let mut finals = [0.0; 2];
        for (slot, variant) in [FitVariant::MetaLearner, FitVariant::L1Distance].into_iter().enumerate() {
            let curve = fit_to_oracle(&records, config.n_states, config.c, variant, &config.fit, seed)?;
            for (step, (&train_loss, &distance_error)) in curve.train_loss.iter().zip(&curve.distance_error).enumerate() {
                curves.serialize(CurveRow {
                    seed,
                    variant: variant.name(),
                    step,
                    train_loss,
                    distance_error,
                })?;
            }
            finals[slot] = curve.smoothed_final(config.smoothing_window);
        }
        seeds.push(FitSeedResult {
            seed,
            meta_learner_final: finals[0],
            l1_distance_final: finals[1],
            ratio: finals[0] / finals[1],
        });
    }
    curves.flush()?;
    let mean = |f: fn(&FitSeedResult) -> f64| seeds.iter().map(f).sum::<f64>() / seeds.len() as f64;
    let (meta, l1) = (mean(|s| s.meta_learner_final), mean(|s| s.l1_distance_final));
    let report = FitReport {
        smoothing_window: config.smoothing_window,
        seeds,
        meta_learner_mean: meta,
        l1_distance_mean: l1,
        ratio: meta / l1,
    };
    fs::write(config.out_dir.join("report.json"), to_json(&report)?)?;
    Ok(report)
}
