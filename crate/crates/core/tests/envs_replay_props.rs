use std::collections::{HashMap, HashSet};

use ambs_core::envs::{BackgroundMode, EnvConfig, Observation, PointMass, Split};
use ambs_core::replay::{ReplayBuffer, Transition};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env(mode: BackgroundMode, split: Split, seed: u64) -> PointMass {
    let mut cfg = EnvConfig::default();
    cfg.frame_size = 24;
    cfg.episode_len = 30;
    cfg.background.mode = mode;
    cfg.background.split = split;
    cfg.background.seed = seed;
    PointMass::new(cfg).unwrap()
}

fn mode() -> impl Strategy<Value = BackgroundMode> {
    prop_oneof![Just(BackgroundMode::None), Just(BackgroundMode::Noise), Just(BackgroundMode::Scroll)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rollouts_are_deterministic_and_rewards_in_range(
        mode in mode(), seed in 0u64..1000,
        actions in proptest::collection::vec((-1.0f32..1.0, -1.0f32..1.0), 30),
    ) {
        let (mut a, mut b) = (env(mode, Split::Train, 5), env(mode, Split::Train, 5));
        prop_assert_eq!(a.reset(seed), b.reset(seed));
        for (k, &(x, y)) in actions.iter().enumerate() {
            let sa = a.step(&[x, y]).unwrap();
            let sb = b.step(&[x, y]).unwrap();
            prop_assert_eq!(&sa, &sb);
            prop_assert!(sa.reward > 0.0 && sa.reward <= 4.0);
            prop_assert_eq!(sa.done, k + 1 == 30);
            let p = a.position();
            prop_assert!(p[0].abs() <= 1.0 && p[1].abs() <= 1.0);
        }
        prop_assert!(a.step(&[0.0, 0.0]).is_err());
    }
}

fn background_hashes(mode: BackgroundMode, split: Split, episodes: u64) -> HashSet<Vec<u8>> {
    let mut e = env(mode, split, 11);
    let mut frames = HashSet::new();
    for ep in 0..episodes {
        e.reset(ep);
        frames.insert(e.background_frame());
        while !e.is_done() {
            e.step(&[0.3, -0.2]).unwrap();
            frames.insert(e.background_frame());
        }
    }
    frames
}

#[test]
fn train_and_eval_backgrounds_never_intersect() {
    for mode in [BackgroundMode::Noise, BackgroundMode::Scroll] {
        let train = background_hashes(mode, Split::Train, 6);
        let eval = background_hashes(mode, Split::Eval, 6);
        assert!(train.len() > 100 && eval.len() > 100);
        assert!(train.is_disjoint(&eval), "{mode:?}");
    }
}

#[test]
fn scroll_background_moves_every_tick() {
    let mut e = env(BackgroundMode::Scroll, Split::Train, 0);
    e.reset(0);
    let before = e.background_frame();
    e.step(&[0.0, 0.0]).unwrap();
    let after = e.background_frame();
    // Four ticks at one pixel each: column x now shows what column x+4 showed.
    let s = 24;
    for k in 0..3 {
        for y in 0..s {
            for x in 0..s - 4 {
                assert_eq!(after[(k * s + y) * s + x], before[(k * s + y) * s + x + 4]);
            }
        }
    }
}

fn tagged(k: usize) -> Transition {
    let obs = Observation { shape: [1, 1, 2], data: vec![(k % 256) as u8, (k / 256) as u8] };
    Transition { obs: obs.clone(), action: vec![0.0], reward: k as f32, next_obs: obs, done: false }
}

proptest! {
    #[test]
    fn pair_batches_are_permutations(cap in 1usize..40, pushes in 1usize..80, batch in 1usize..16, seed in 0u64..1000) {
        let mut b = ReplayBuffer::new(cap).unwrap();
        for k in 0..pushes {
            b.push(tagged(k)).unwrap();
        }
        prop_assert_eq!(b.len(), pushes.min(cap));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match b.sample_pair_batch(batch, &mut rng) {
            Err(_) => prop_assert!(batch > b.len()),
            Ok(pb) => {
                prop_assert_eq!(pb.i.len(), batch);
                let mut ri: Vec<f32> = pb.i.iter().map(|t| t.reward).collect();
                let mut rj: Vec<f32> = pb.j.iter().map(|t| t.reward).collect();
                for (k, &p) in pb.perm.iter().enumerate() {
                    prop_assert_eq!(pb.j[k], pb.i[p]);
                }
                ri.sort_by(f32::total_cmp);
                rj.sort_by(f32::total_cmp);
                prop_assert_eq!(ri, rj);
                // Only transitions still in the buffer can be drawn.
                let oldest = pushes.saturating_sub(cap) as f32;
                prop_assert!(pb.i.iter().all(|t| t.reward >= oldest));
                let mut again = ChaCha8Rng::seed_from_u64(seed);
                prop_assert_eq!(b.sample_pair_batch(batch, &mut again).unwrap().perm, pb.perm);
            }
        }
    }
}

#[test]
fn shuffle_is_uniform_over_s4() {
    let mut b = ReplayBuffer::new(8).unwrap();
    for k in 0..8 {
        b.push(tagged(k)).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 10_000;
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for _ in 0..draws {
        *counts.entry(b.sample_pair_batch(4, &mut rng).unwrap().perm).or_default() += 1;
    }
    assert_eq!(counts.len(), 24);
    let expect = draws as f64 / 24.0;
    let chi2: f64 = counts.values().map(|&n| (n as f64 - expect).powi(2) / expect).sum();
    // Chi-square with 23 dof: the 0.999 quantile is about 49.7.
    assert!(chi2 < 49.7, "chi2 {chi2}");
}
