use ambs_core::bisim::{
    bisim_fixed_point, bisim_operator, check_discount_bound, check_value_bound, reference, PseudoMetric, TabularMdp,
    TabularPolicy,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, n: usize) -> (TabularMdp, TabularPolicy) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = TabularMdp::random(n, 2, 0.9, &mut rng);
    let pi = TabularPolicy::random(n, 2, &mut rng);
    (mdp, pi)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn iterates_increase_and_stay_below_one(seed in 0u64..10_000, n in 2usize..7, c in 0.05f64..0.95) {
        let (mdp, pi) = instance(seed, n);
        let mut d = PseudoMetric::zeros(n);
        for _ in 0..30 {
            let next = bisim_operator(&mdp, &pi, c, &d).unwrap();
            for k in 0..n * n {
                prop_assert!(next.d[k] >= d.d[k] - 1e-12);
                prop_assert!(next.d[k] <= 1.0 + 1e-12);
            }
            d = next;
        }
    }

    #[test]
    fn fixed_point_is_a_pseudometric(seed in 0u64..10_000, n in 2usize..7, c in 0.05f64..0.95) {
        let (mdp, pi) = instance(seed, n);
        let fp = bisim_fixed_point(&mdp, &pi, c, 1e-9).unwrap();
        prop_assert!(fp.metric.is_pseudometric());
        prop_assert!(fp.metric.max_triangle_violation() <= 1e-8);
        prop_assert!(fp.iterations <= fp.contraction_bound);
        prop_assert!(fp.max_contraction_ratio <= c + 1e-9);
    }

    #[test]
    fn relabeling_states_permutes_the_metric(seed in 0u64..10_000, n in 2usize..7) {
        let (mdp, pi) = instance(seed, n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
        let a = bisim_fixed_point(&mdp, &pi, 0.6, 1e-10).unwrap().metric;
        let b = bisim_fixed_point(&mdp.permuted(&perm), &pi.permuted(&perm), 0.6, 1e-10).unwrap().metric;
        for i in 0..n {
            for j in 0..n {
                prop_assert!((a.get(i, j) - b.get(perm[i], perm[j])).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn value_bounds_hold(seed in 0u64..10_000, n in 2usize..6, c in 0.05f64..0.95, gamma in 0.0f64..0.99) {
        let (mdp, pi) = instance(seed, n);
        let rep = check_value_bound(&mdp, &pi, c, gamma, 1e-9).unwrap();
        prop_assert!(rep.max_violation <= 1e-8, "{:?}", rep);
        if c >= gamma {
            prop_assert_eq!(rep.correction, 0.0);
        }
    }

    #[test]
    fn discount_bound_holds(seed in 0u64..10_000, g1 in 0.0f64..0.98, dg in 0.0f64..0.5) {
        let (mdp, pi) = instance(seed, 6);
        let g2 = (g1 + dg).min(0.99);
        prop_assert!(check_discount_bound(&mdp, &pi, g1, g2).unwrap().max_violation <= 1e-8);
    }
}

#[test]
fn matches_brute_force_on_sparse_mdps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..10 {
        let n = 2 + k % 5;
        let mdp = TabularMdp::random_sparse(n, 2, 0.9, 3, &mut rng);
        let pi = TabularPolicy::random(n, 2, &mut rng);
        let c = 0.1 + 0.1 * (k % 9) as f64;
        let fp = bisim_fixed_point(&mdp, &pi, c, 1e-9).unwrap();
        let (brute, _) = reference::fixed_point_brute_force(&mdp, &pi, c, 1e-9, 10_000).unwrap();
        for (a, b) in fp.metric.d.iter().zip(&brute) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}
