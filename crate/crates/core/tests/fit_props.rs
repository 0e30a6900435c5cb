use ambs_core::agent::{fit_to_oracle, FitConfig, FitVariant};
use ambs_core::bisim::{bisim_fixed_point, emit_supervision, SupervisionRecord, TabularMdp, TabularPolicy};
use ambs_core::nets::NetConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn records(n: usize, c: f64) -> Vec<SupervisionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mdp = TabularMdp::random(n, 2, 0.9, &mut rng);
    let pi = TabularPolicy::random(n, 2, &mut rng);
    let fp = bisim_fixed_point(&mdp, &pi, c, 1e-9).unwrap();
    emit_supervision(&mdp, &pi, c, &fp.metric).unwrap()
}

fn small(batch_size: Option<usize>, noise_background: bool) -> FitConfig {
    FitConfig {
        steps: 200,
        lr: 3e-3,
        // At 16px the four-layer encoder ends at 1×1 and can start with
        // every unit dead, leaving all embeddings equal.
        frame_size: 24,
        noise_background,
        batch_size,
        net: NetConfig {
            conv_channels: 8,
            z_r: 4,
            z_d: 4,
            meta_hidden: 8,
            ..FitConfig::default().net
        },
    }
}

fn block_mean(v: &[f64], range: std::ops::Range<usize>) -> f64 {
    v[range.clone()].iter().sum::<f64>() / range.len() as f64
}

#[test]
fn both_variants_descend_and_report_positive_finite_curves() {
    let c = 0.5;
    let recs = records(6, c);
    for (batch, noise) in [(None, false), (Some(12), true)] {
        for variant in [FitVariant::MetaLearner, FitVariant::L1Distance] {
            let curve = fit_to_oracle(&recs, 6, c, variant, &small(batch, noise), 1).unwrap();
            assert_eq!(curve.distance_error.len(), 200);
            assert!(curve.train_loss.iter().chain(&curve.distance_error).all(|v| v.is_finite() && *v >= 0.0));
            let (early, late) = (block_mean(&curve.train_loss, 0..20), block_mean(&curve.train_loss, 180..200));
            assert!(late < early, "{} batch {batch:?}: {early} -> {late}", variant.name());
        }
    }
}

#[test]
fn l1_objective_is_its_distance_error() {
    // The L1 variant regresses the combined distance directly, so its
    // objective and the compared distance error coincide.
    let c = 0.3;
    let recs = records(5, c);
    let l1 = fit_to_oracle(&recs, 5, c, FitVariant::L1Distance, &small(None, false), 2).unwrap();
    for (a, b) in l1.train_loss.iter().zip(&l1.distance_error) {
        assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()), "{a} vs {b}");
    }
}

#[test]
fn fits_are_reproducible_and_seed_dependent() {
    let recs = records(6, 0.5);
    let cfg = small(Some(12), true);
    let a = fit_to_oracle(&recs, 6, 0.5, FitVariant::MetaLearner, &cfg, 3).unwrap();
    let b = fit_to_oracle(&recs, 6, 0.5, FitVariant::MetaLearner, &cfg, 3).unwrap();
    let other = fit_to_oracle(&recs, 6, 0.5, FitVariant::MetaLearner, &cfg, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.distance_error, other.distance_error);
    assert!((a.smoothed_final(10) - block_mean(&a.distance_error, 190..200)).abs() < 1e-15);
}

#[test]
fn bad_inputs_are_rejected() {
    let recs = records(4, 0.5);
    let cfg = small(Some(4), false);
    assert!(fit_to_oracle(&recs, 3, 0.5, FitVariant::MetaLearner, &cfg, 1).is_err());
    assert!(fit_to_oracle(&recs, 4, 1.0, FitVariant::MetaLearner, &cfg, 1).is_err());
    assert!(fit_to_oracle(&[], 4, 0.5, FitVariant::L1Distance, &cfg, 1).is_err());
    // Sampled pairs need supervision for every ordered pair.
    let partial: Vec<_> = recs.iter().filter(|r| r.i <= r.j).cloned().collect();
    assert!(fit_to_oracle(&partial, 4, 0.5, FitVariant::L1Distance, &cfg, 1).is_err());
}

