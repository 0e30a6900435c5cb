use ambs_core::agent::*;
use ambs_core::diffcore::ParamId;
use ambs_core::envs::{BackgroundMode, EnvConfig, PointMass, Split};
use ambs_core::losses::{actor_loss, prepare_inputs, LossInputs};
use ambs_core::nets::{IoShape, NetConfig};
use ambs_core::replay::ReplayBuffer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env_config(mode: BackgroundMode) -> EnvConfig {
    let mut env = EnvConfig {
        frame_size: 16,
        episode_len: 20,
        ..EnvConfig::default()
    };
    env.background.mode = mode;
    env
}

fn tiny_net() -> NetConfig {
    NetConfig {
        conv_channels: 4,
        z_r: 3,
        z_d: 3,
        meta_hidden: 5,
        dynamics_hidden: 6,
        critic_hidden: 6,
        actor_hidden: [5, 6],
        ..NetConfig::desk()
    }
}

fn agent(ablation: Ablation, seed: u64) -> (Agent, EnvConfig) {
    let env = env_config(BackgroundMode::Noise);
    let train = TrainConfig {
        batch_size: 8,
        warmup_steps: 20,
        seed,
        ablation,
        ..TrainConfig::default()
    };
    let io = IoShape {
        channels: env.obs_shape()[0],
        frame_size: env.frame_size,
        action_dim: 2,
    };
    (Agent::new(train, tiny_net(), io).unwrap(), env)
}

/// Collect/train loop; returns the diagnostics rows.
fn run(agent: &mut Agent, env: &EnvConfig, steps: u64, seed: u64) -> Vec<LossBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut collector = Collector::new(env.clone(), seed).unwrap();
    let mut buffer = ReplayBuffer::new(1000).unwrap();
    let warmup = agent.config().warmup_steps;
    let mut rows = Vec::new();
    for _ in 0..steps {
        collector.collect_step(agent, &mut buffer, &mut rng, warmup).unwrap();
        if buffer.len() >= agent.config().batch_size {
            rows.push(agent.train_step(&buffer, &mut rng).unwrap());
        }
    }
    rows
}

fn values(agent: &Agent, ids: &[ParamId]) -> Vec<Vec<f32>> {
    ids.iter().map(|&id| agent.store().get(id).data().to_vec()).collect()
}

fn filled_buffer(env: &EnvConfig, n: usize) -> ReplayBuffer {
    let (agent, _) = agent(Ablation::default(), 0);
    let mut collector = Collector::new(env.clone(), 5).unwrap();
    let mut buffer = ReplayBuffer::new(1000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..n {
        collector.collect_step(&agent, &mut buffer, &mut rng, u64::MAX).unwrap();
    }
    buffer
}

#[test]
fn identical_seeds_give_identical_rows() {
    let (mut a, env) = agent(Ablation::default(), 3);
    let (mut b, _) = agent(Ablation::default(), 3);
    let ra = run(&mut a, &env, 110, 9);
    let rb = run(&mut b, &env, 110, 9);
    assert!(ra.len() >= 100);
    assert_eq!(ra, rb);
}

#[test]
fn tau_one_copies_online_into_targets() {
    let (mut a, env) = agent(Ablation::default(), 1);
    run(&mut a, &env, 30, 1);
    a.soft_update_targets(1.0, 1.0).unwrap();
    let mut pairs = a.nets().critic_pairs();
    pairs.extend(a.nets().encoder_pairs());
    for (online, target) in pairs {
        assert_eq!(a.store().get(online), a.store().get(target));
    }
}

#[test]
fn target_drift_shrinks_by_one_minus_tau() {
    let (mut a, env) = agent(Ablation::default(), 2);
    run(&mut a, &env, 40, 2);
    let pairs = a.nets().critic_pairs();
    let gap = |a: &Agent| {
        pairs
            .iter()
            .flat_map(|&(o, t)| a.store().get(o).data().iter().zip(a.store().get(t).data()).map(|(x, y)| (x - y).abs() as f64).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    };
    let before = gap(&a);
    assert!(before > 0.0);
    a.soft_update_targets(0.25, 0.25).unwrap();
    let after = gap(&a);
    assert!((after - 0.75 * before).abs() <= 1e-6 * before.max(1.0), "{after} vs {}", 0.75 * before);
}

#[test]
fn updates_follow_the_two_step_schedule() {
    let (mut a, env) = agent(Ablation::default(), 4);
    let rows = run(&mut a, &env, 40, 4);
    for row in &rows {
        assert_eq!(row.actor_loss.is_some(), row.step % 2 == 0, "step {}", row.step);
        assert_eq!(row.alpha_loss.is_some(), row.step % 2 == 0);
        assert!(row.c > 0.0 && row.c < 1.0);
        assert!(row.skipped.is_empty());
    }
    // On an odd step the target networks must not move.
    let (mut a, env) = agent(Ablation::default(), 4);
    let buffer = filled_buffer(&env, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let targets: Vec<ParamId> = a.nets().critic_pairs().into_iter().chain(a.nets().encoder_pairs()).map(|(_, t)| t).collect();
    a.train_step(&buffer, &mut rng).unwrap();
    let after_even = values(&a, &targets);
    a.train_step(&buffer, &mut rng).unwrap();
    assert_eq!(values(&a, &targets), after_even);
    a.train_step(&buffer, &mut rng).unwrap();
    assert_ne!(values(&a, &targets), after_even);
}

#[test]
fn l1_ablation_never_touches_meta_learners() {
    let (mut a, env) = agent(
        Ablation {
            l1_baseline: true,
            ..Ablation::default()
        },
        5,
    );
    let meta = a.nets().meta_ids();
    let before = values(&a, &meta);
    let rows = run(&mut a, &env, 40, 5);
    assert!(!rows.is_empty());
    assert_eq!(values(&a, &meta), before);
}

#[test]
fn every_ablation_trains_without_skips() {
    let ablations = [
        Ablation { no_aug: true, ..Ablation::default() },
        Ablation { no_c_split: true, ..Ablation::default() },
        Ablation { fixed_c: Some(0.5), ..Ablation::default() },
        Ablation { weights_1_gamma: true, ..Ablation::default() },
        Ablation { share_full_encoder: true, ..Ablation::default() },
    ];
    for ablation in ablations {
        let (mut a, env) = agent(ablation.clone(), 6);
        let rows = run(&mut a, &env, 30, 6);
        assert!(rows.iter().all(|r| r.skipped.is_empty() && r.q_loss.is_finite() && r.repr_loss.is_finite()), "{ablation:?}");
    }
}

#[test]
fn fixed_c_keeps_eta_c_frozen_and_reports_constant() {
    let (mut a, env) = agent(Ablation { fixed_c: Some(0.3), ..Ablation::default() }, 7);
    let eta = vec![a.nets().eta_c];
    let before = values(&a, &eta);
    let rows = run(&mut a, &env, 30, 7);
    assert!(rows.iter().all(|r| r.c == 0.3));
    assert_eq!(values(&a, &eta), before);
}

#[test]
fn nan_loss_skips_its_update_and_counts_the_step() {
    let (mut a, env) = agent(Ablation::default(), 8);
    let buffer = filled_buffer(&env, 30);
    let f_r = a.nets().meta_ids()[0];
    a.store_mut().get_mut(f_r).data_mut()[0] = f32::NAN;
    let conv = a.nets().conv_ids(false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let row = a.train_step(&buffer, &mut rng).unwrap();
    assert_eq!(row.skipped, "repr_loss");
    assert_eq!(a.step(), 1);
    assert_eq!(a.consecutive_skips(), 1);
    assert!(conv.iter().all(|&id| a.store().get(id).all_finite()));
}

#[test]
fn warmup_actions_are_uniform() {
    let (a, env) = agent(Ablation::default(), 9);
    let mut env = env;
    env.episode_len = 1000;
    let mut collector = Collector::new(env, 9).unwrap();
    let mut buffer = ReplayBuffer::new(20_000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut draws = Vec::new();
    for _ in 0..5000 {
        let out = collector.collect_step(&a, &mut buffer, &mut rng, u64::MAX).unwrap();
        draws.extend(out.transition.action.iter().map(|&x| x as f64));
    }
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    let d = draws
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = (x + 1.0) / 2.0;
            (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    // Kolmogorov–Smirnov critical value at the 1% level.
    assert!(d < 1.63 / n.sqrt(), "KS statistic {d}");
}

#[test]
fn evaluation_is_positive_repeatable_and_held_out() {
    let (a, env) = agent(Ablation::default(), 10);
    let first = evaluate(&a, &env, 2, 77).unwrap();
    assert!(first.mean > 0.0);
    let dir = tempfile::tempdir().unwrap();
    a.save_checkpoint(dir.path()).unwrap();
    let restored = Agent::load_checkpoint(dir.path()).unwrap();
    assert_eq!(evaluate(&restored, &env, 2, 77).unwrap(), first);

    let mut scroll = env_config(BackgroundMode::Scroll);
    let mut frames = |split: Split| {
        scroll.background.split = split;
        let mut e = PointMass::new(scroll.clone()).unwrap();
        let mut seen = std::collections::HashSet::new();
        for ep in 0..3 {
            e.reset(ep);
            for _ in 0..5 {
                seen.insert(e.background_frame());
                e.step(&[0.0, 0.0]).unwrap();
            }
        }
        seen
    };
    let train = frames(Split::Train);
    let eval = frames(Split::Eval);
    assert!(train.is_disjoint(&eval));
}

#[test]
fn sharing_the_encoder_changes_only_the_actor_input_width() {
    let (plain, _) = agent(Ablation::default(), 11);
    let (shared, _) = agent(Ablation { share_full_encoder: true, ..Ablation::default() }, 11);
    let count = |a: &Agent| a.store().numel(&a.store().ids().collect::<Vec<_>>()) as i64;
    let net = tiny_net();
    let diff = (plain.nets().conv_features() as i64 - (net.z_r + net.z_d) as i64) * net.actor_hidden[0] as i64;
    assert_ne!(diff, 0);
    assert_eq!(count(&plain) - count(&shared), diff);
    let actor = |a: &Agent| a.store().numel(&a.nets().actor_ids()) as i64;
    assert_eq!(actor(&plain) - actor(&shared), diff);
}

/// The actor's gradient does not depend on whether the meta-learners and the
/// dynamics model have already been updated in the same step.
#[test]
fn actor_gradient_ignores_meta_and_dynamics_updates() {
    let (a, env) = agent(Ablation::default(), 12);
    let buffer = filled_buffer(&env, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = buffer.sample_pair_batch(8, &mut rng).unwrap();
    let inp: LossInputs<f32> = prepare_inputs(&batch, a.nets().obs_shape(), 4, 2, &mut rng).unwrap();
    let grad = |a: &Agent| {
        let built = actor_loss(a.nets(), a.store(), &inp, 0.1, a.settings()).unwrap();
        let g = built.graph.backward(built.loss).unwrap();
        a.nets().actor_ids().iter().map(|&id| g.wrt_param(id).unwrap().data().to_vec()).collect::<Vec<_>>()
    };
    let before = grad(&a);
    let (mut b, _) = agent(Ablation::default(), 12);
    let mut touched = b.nets().meta_ids();
    touched.extend(b.nets().dynamics_ids());
    for id in touched {
        b.store_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.5);
    }
    assert_eq!(grad(&b), before);
}

#[test]
fn adaptive_weight_moves_and_stays_inside_the_interval() {
    let (mut a, env) = agent(Ablation::default(), 13);
    let rows = run(&mut a, &env, 200, 13);
    assert!(rows.iter().all(|r| r.c > 0.0 && r.c < 1.0));
    assert!(rows.iter().any(|r| r.c != 0.5));
}
