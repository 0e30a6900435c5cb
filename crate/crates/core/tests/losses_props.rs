use ambs_core::diffcore::{Adam, AdamConfig, Mutation, ParamStore, Tensor};
use ambs_core::losses::check::{check_all_losses, settings, stop_gradient_ledger, tiny_inputs, tiny_networks};
use ambs_core::losses::*;
use ambs_core::nets::{Networks, Variant};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64) -> (Networks, ParamStore<f64>, LossInputs<f64>) {
    let (nets, store) = tiny_networks(Variant::default(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let inp = tiny_inputs(nets.io, 4, 2, &mut rng);
    (nets, store, inp)
}

fn fill(store: &mut ParamStore<f64>, name: &str, value: f64) {
    let id = store.lookup(name).unwrap_or_else(|| panic!("no param {name}"));
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = value);
}

#[test]
fn every_loss_passes_gradcheck() {
    for seed in [1, 2] {
        for c in check_all_losses(seed, None).unwrap() {
            assert!(c.passed, "{} seed {seed}: {:?}", c.loss, c.report);
            assert!(c.report.coordinates_checked > 0, "{}", c.loss);
        }
    }
}

#[test]
fn abs_fault_is_caught_in_similarity_losses() {
    let checks = check_all_losses(1, Some(Mutation::FlipAbsGrad)).unwrap();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.loss).collect();
    assert!(failed.contains(&"repr_loss"), "{failed:?}");
    assert!(failed.contains(&"l1_baseline_loss"), "{failed:?}");
}

/// Each loss produces gradient only inside its update set, and some inside
/// every group of that set.
#[test]
fn stop_gradient_ledger_matches_update_sets() {
    let expect: [(&str, &[&str]); 6] = [
        ("repr_loss", &["conv", "heads", "meta"]),
        ("q_loss", &["conv", "heads", "critics", "eta_c"]),
        ("actor_loss", &["actor"]),
        ("alpha_loss", &["log_alpha"]),
        ("dynamics_loss", &["dynamics"]),
        ("l1_baseline_loss", &["conv", "heads"]),
    ];
    for seed in [3, 4] {
        let ledger = stop_gradient_ledger(seed).unwrap();
        assert_eq!(ledger.len(), 6 * 8);
        for e in &ledger {
            let touched = expect.iter().find(|(l, _)| *l == e.loss).unwrap_or_else(|| panic!("unexpected loss {}", e.loss)).1;
            assert_eq!(e.expected, touched.contains(&e.group), "{} / {}: update set disagrees with the table", e.loss, e.group);
            assert!(e.passed(), "{} / {}: max |grad| {} (expected {})", e.loss, e.group, e.max_abs_grad, if e.expected { "nonzero" } else { "zero" });
        }
    }
}

#[test]
fn repr_loss_reduces_to_single_branch_at_weight_extremes() {
    let (nets, store, inp) = instance(4);
    let targets = pair_targets(&nets, &store, &inp).unwrap();
    let reward_only = repr_loss(&nets, &store, &inp, &targets, &settings(WeightMode::Fixed(0.0))).unwrap();
    let r = reward_only.stats.reward_term.unwrap();
    assert!((reward_only.value() - 2.0 * r).abs() < 1e-12);
    let dynamics_only = repr_loss(&nets, &store, &inp, &targets, &settings(WeightMode::Fixed(1.0))).unwrap();
    let d = dynamics_only.stats.dynamics_term.unwrap();
    assert!((dynamics_only.value() - 2.0 * d).abs() < 1e-12);
    let half = repr_loss(&nets, &store, &inp, &targets, &settings(WeightMode::Fixed(0.5))).unwrap();
    assert!((half.value() - (r + d)).abs() < 1e-12);
}

#[test]
fn repr_loss_is_swap_invariant_with_shared_crops() {
    let (nets, store, mut inp) = instance(5);
    inp.obs[1] = inp.obs[0].clone();
    let s = settings(WeightMode::Adaptive);
    let base = build_loss(LossKind::Repr, &nets, &store, &inp, 0.1, &s).unwrap().value();
    // Swap roles: the new i side is the old j side, paired by the inverse permutation.
    let perm = inp.perm.clone();
    let mut inverse = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inverse[p] = k;
    }
    let swapped = LossInputs {
        obs: [inp.obs[0].gather_rows(&perm), inp.obs[1].gather_rows(&perm)],
        next_obs: [inp.next_obs[0].gather_rows(&perm), inp.next_obs[1].gather_rows(&perm)],
        actions: inp.actions.gather_rows(&perm),
        rewards: inp.rewards.gather_rows(&perm),
        not_done: inp.not_done.gather_rows(&perm),
        perm: inverse,
        ..inp.clone()
    };
    let value = build_loss(LossKind::Repr, &nets, &store, &swapped, 0.1, &s).unwrap().value();
    assert!((value - base).abs() <= 1e-6 * base.abs().max(1.0), "{value} vs {base}");
}

#[test]
fn perfect_meta_learner_stub_gives_zero_loss() {
    let (nets, mut store, mut inp) = instance(6);
    inp.perm = (0..inp.batch_size()).collect();
    for name in ["f_r/1/w", "f_r/1/b", "f_d/1/w", "f_d/1/b"] {
        fill(&mut store, name, 0.0);
    }
    let built = build_loss(LossKind::Repr, &nets, &store, &inp, 0.1, &settings(WeightMode::Adaptive)).unwrap();
    assert_eq!(built.value(), 0.0);
}

#[test]
fn repr_loss_never_moves_eta_c_but_q_loss_does() {
    let (nets, store, inp) = instance(7);
    let s = settings(WeightMode::Adaptive);
    let repr = build_loss(LossKind::Repr, &nets, &store, &inp, 0.1, &s).unwrap();
    let g = repr.graph.backward(repr.loss).unwrap();
    assert!(g.wrt_param(nets.eta_c).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    let q = build_loss(LossKind::Q, &nets, &store, &inp, 0.1, &s).unwrap();
    let g = q.graph.backward(q.loss).unwrap();
    assert!(g.wrt_param(nets.eta_c).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn exact_critics_give_zero_q_loss() {
    let (nets, mut store, inp) = instance(8);
    for k in ["critic1", "critic2"] {
        fill(&mut store, &format!("{k}/2/w"), 0.0);
        fill(&mut store, &format!("{k}/2/b"), 0.7);
    }
    let y = Tensor::full(&[inp.batch_size(), 1], 0.7);
    let built = q_loss(&nets, &store, &inp, &y, &settings(WeightMode::Adaptive)).unwrap();
    assert_eq!(built.value(), 0.0);
}

#[test]
fn target_value_terminal_discount_and_linearity() {
    let (nets, store, mut inp) = instance(9);
    let r: Vec<f64> = inp.rewards.data().to_vec();
    let mut s = settings(WeightMode::Adaptive);
    s.gamma = 0.0;
    assert_eq!(target_value(&nets, &store, &inp, 0.1, &s).unwrap().data(), r.as_slice());
    let s = settings(WeightMode::Adaptive);
    let y = target_value(&nets, &store, &inp, 0.1, &s).unwrap();
    // Row 0 is terminal in the tiny batch.
    assert_eq!(y.data()[0], r[0]);
    inp.rewards = inp.rewards.map(|v| 2.0 * v);
    let y2 = target_value(&nets, &store, &inp, 0.1, &s).unwrap();
    for k in 0..r.len() {
        assert!((y2.data()[k] - y.data()[k] - r[k]).abs() < 1e-12);
    }
    let mut done = inp.clone();
    done.not_done = Tensor::zeros(&[r.len(), 1]);
    assert_eq!(target_value(&nets, &store, &done, 0.1, &s).unwrap().data(), done.rewards.data());
}

#[test]
fn entropy_sign_switch_changes_target_by_alpha_log_prob() {
    let (nets, store, inp) = instance(10);
    let standard = settings(WeightMode::Adaptive);
    let printed = LossSettings {
        entropy_sign: EntropySign::Printed,
        ..standard
    };
    let a = target_value(&nets, &store, &inp, 0.0, &standard).unwrap();
    let b = target_value(&nets, &store, &inp, 0.0, &printed).unwrap();
    assert_eq!(a, b);
    let a = target_value(&nets, &store, &inp, 0.3, &standard).unwrap();
    let b = target_value(&nets, &store, &inp, 0.3, &printed).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn actor_loss_finite_at_log_std_bounds_and_descends_on_frozen_critic() {
    let (nets, mut store, inp) = instance(11);
    let s = settings(WeightMode::Adaptive);
    for bias in [100.0, -100.0] {
        let id = store.lookup("actor/3/b").unwrap();
        store.get_mut(id).data_mut()[2..].iter_mut().for_each(|v| *v = bias);
        let built = actor_loss(&nets, &store, &inp, 0.1, &s).unwrap();
        assert!(built.value().is_finite());
        assert!(built.stats.log_prob.unwrap().all_finite());
    }
    let (nets, mut store, inp) = instance(11);
    let mut adam = Adam::new(AdamConfig::with_lr(1e-2), nets.actor_ids(), &store).unwrap();
    let first = actor_loss(&nets, &store, &inp, 0.0, &s).unwrap().value();
    let mut last = first;
    for _ in 0..20 {
        let built = actor_loss(&nets, &store, &inp, 0.0, &s).unwrap();
        last = built.value();
        let grads = built.graph.backward(built.loss).unwrap();
        adam.step(&mut store, &grads);
    }
    assert!(last < first, "{last} !< {first}");
}

#[test]
fn alpha_loss_stationary_at_target_and_shrinks_when_too_entropic() {
    let (nets, mut store, _) = instance(12);
    let target = -2.0;
    let at_target = Tensor::full(&[4, 1], 2.0);
    let built = alpha_loss(&nets, &store, &at_target, target).unwrap();
    let g = built.graph.backward(built.loss).unwrap();
    assert_eq!(g.wrt_param(nets.log_alpha).unwrap().item(), 0.0);

    let entropic = Tensor::full(&[4, 1], -5.0);
    let mut adam = Adam::new(AdamConfig::with_lr(1e-2), vec![nets.log_alpha], &store).unwrap();
    let mut prev = store.get(nets.log_alpha).item().exp();
    for _ in 0..50 {
        let built = alpha_loss(&nets, &store, &entropic, target).unwrap();
        let g = built.graph.backward(built.loss).unwrap();
        adam.step(&mut store, &g);
        let alpha = store.get(nets.log_alpha).item().exp();
        assert!(alpha < prev && alpha > 0.0);
        prev = alpha;
    }
}

#[test]
fn dynamics_loss_zero_at_exact_mean_and_matches_upper_clamp() {
    let (nets, mut store, inp) = instance(13);
    let s = settings(WeightMode::Adaptive);
    for name in ["head_d/w", "head_d/b", "dynamics/1/w", "dynamics/1/b"] {
        fill(&mut store, name, 0.0);
    }
    assert_eq!(dynamics_loss(&nets, &store, &inp, &s).unwrap().value(), 0.0);
    // φ_d ≡ 1, μ ≡ 0, log σ above the clamp: error 1 per dim, σ = 10.
    fill(&mut store, "head_d/b", 1.0);
    let id = store.lookup("dynamics/1/b").unwrap();
    let z = nets.embedding_sizes().1;
    store.get_mut(id).data_mut()[z..].iter_mut().for_each(|v| *v = 50.0);
    let value = dynamics_loss(&nets, &store, &inp, &s).unwrap().value();
    assert!((value - (1.0f64 / 20.0).powi(2)).abs() < 1e-12, "{value}");
}

#[test]
fn l1_baseline_examples() {
    let (nets, mut store, mut inp) = instance(14);
    let s = settings(WeightMode::Adaptive);
    let identity: Vec<usize> = (0..inp.batch_size()).collect();
    let perm = std::mem::replace(&mut inp.perm, identity);
    assert_eq!(build_loss(LossKind::L1Baseline, &nets, &store, &inp, 0.1, &s).unwrap().value(), 0.0);
    inp.perm = perm;
    let targets = pair_targets(&nets, &store, &inp).unwrap();
    for name in ["head_r/w", "head_r/b", "head_d/w", "head_d/b"] {
        fill(&mut store, name, 0.0);
    }
    let expect: f64 = targets.reward_gap.iter().zip(&targets.w2).map(|(r, w)| (r + s.gamma * w).powi(2)).sum::<f64>() / inp.batch_size() as f64;
    let value = l1_baseline_loss(&nets, &store, &inp, &targets, &s).unwrap().value();
    assert!((value - expect).abs() < 1e-12);
}

#[test]
fn single_embedding_variant_builds_and_checks() {
    let (nets, store) = tiny_networks(Variant { single_embedding: true, actor_on_embeddings: true }, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let inp = tiny_inputs(nets.io, 3, 2, &mut rng);
    let s = settings(WeightMode::Adaptive);
    for kind in LossKind::ALL {
        let built = build_loss(kind, &nets, &store, &inp, 0.1, &s).unwrap();
        assert!(built.value().is_finite(), "{}", kind.name());
        built.graph.backward(built.loss).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn nonnegative_losses_stay_nonnegative(seed in 0u64..10_000) {
        let (nets, store, inp) = instance(seed);
        let s = settings(WeightMode::Adaptive);
        for kind in [LossKind::Repr, LossKind::Q, LossKind::Dynamics, LossKind::L1Baseline] {
            let v = build_loss(kind, &nets, &store, &inp, 0.1, &s).unwrap().value();
            prop_assert!(v >= 0.0 && v.is_finite(), "{} = {}", kind.name(), v);
        }
    }
}
