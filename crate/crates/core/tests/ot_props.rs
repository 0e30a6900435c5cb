use ambs_core::ot::{
    reference, transport_unchecked, w1_discrete, w2_diag_gaussian, w2_empirical_samples, w2_quantile_grid,
    DiagGaussian, DiscreteDistribution,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random metric: Euclidean distances of random points in the plane.
fn metric(points: &[(f64, f64)]) -> Vec<f64> {
    let n = points.len();
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let (a, b) = (points[i], points[j]);
                c[i * n + j] = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            }
        }
    }
    c
}

fn normalize(w: &[f64]) -> DiscreteDistribution {
    let total: f64 = w.iter().sum();
    DiscreteDistribution::new(w.iter().map(|x| x / total).collect()).unwrap()
}

fn instance(n: usize) -> impl Strategy<Value = (Vec<(f64, f64)>, Vec<Vec<f64>>)> {
    (
        proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n),
        proptest::collection::vec(
            proptest::collection::vec(prop_oneof![1 => Just(0.0), 4 => 0.01f64..1.0], n),
            3,
        ),
    )
        .prop_filter("nonzero mass", |(_, ws)| ws.iter().all(|w| w.iter().sum::<f64>() > 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn w1_is_a_metric((pts, ws) in (2usize..7).prop_flat_map(instance)) {
        let c = metric(&pts);
        let (p, q, r) = (normalize(&ws[0]), normalize(&ws[1]), normalize(&ws[2]));
        let pq = w1_discrete(&p, &q, &c).unwrap();
        let qp = w1_discrete(&q, &p, &c).unwrap();
        let qr = w1_discrete(&q, &r, &c).unwrap();
        let pr = w1_discrete(&p, &r, &c).unwrap();
        let cmax = c.iter().cloned().fold(0.0, f64::max);
        prop_assert!((pq - qp).abs() <= 1e-9);
        prop_assert!(pr <= pq + qr + 1e-8);
        prop_assert!(pq >= -1e-12 && pq <= cmax + 1e-12);
        prop_assert!(w1_discrete(&p, &p, &c).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn simplex_matches_vertex_enumeration((pts, ws) in (2usize..5).prop_flat_map(instance)) {
        let n = pts.len();
        let c = metric(&pts);
        let (p, q) = (normalize(&ws[0]), normalize(&ws[1]));
        let lp = w1_discrete(&p, &q, &c).unwrap();
        let bases = reference::spanning_tree_bases(n, n);
        let brute = reference::w1_by_vertex_enumeration(p.probs(), q.probs(), |i, j| c[i * n + j], &bases).unwrap();
        prop_assert!((lp - brute).abs() <= 1e-6, "lp {} brute {}", lp, brute);
    }

    #[test]
    fn rectangular_problems_match_vertex_enumeration(
        s in proptest::collection::vec(0.05f64..1.0, 1..5),
        d in proptest::collection::vec(0.05f64..1.0, 1..5),
        seed in 0u64..1000,
    ) {
        let (m, n) = (s.len(), d.len());
        prop_assume!(m * n <= 16);
        let st: f64 = s.iter().sum();
        let dt: f64 = d.iter().sum();
        let s: Vec<f64> = s.iter().map(|x| x / st).collect();
        let d: Vec<f64> = d.iter().map(|x| x / dt).collect();
        // Arbitrary non-metric cost exercises the simplex beyond pseudometrics.
        let cost = |i: usize, j: usize| (((i * 31 + j * 17) as u64 ^ seed) % 97) as f64 / 10.0;
        let lp = transport_unchecked(&s, &d, cost).unwrap().cost;
        let brute = reference::w1_by_vertex_enumeration(&s, &d, cost, &reference::spanning_tree_bases(m, n)).unwrap();
        prop_assert!((lp - brute).abs() <= 1e-9);
    }

    #[test]
    fn w2_symmetric_and_triangle(
        mus in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 3),
        sigmas in proptest::collection::vec(proptest::collection::vec(0.05f64..3.0, 4), 3),
    ) {
        let g: Vec<DiagGaussian> = (0..3).map(|k| DiagGaussian::new(mus[k].clone(), sigmas[k].clone()).unwrap()).collect();
        let ab = w2_diag_gaussian(&g[0], &g[1]).unwrap();
        prop_assert_eq!(ab, w2_diag_gaussian(&g[1], &g[0]).unwrap());
        let bc = w2_diag_gaussian(&g[1], &g[2]).unwrap();
        let ac = w2_diag_gaussian(&g[0], &g[2]).unwrap();
        prop_assert!(ac <= ab + bc + 1e-6);
        prop_assert_eq!(w2_diag_gaussian(&g[0], &g[0]).unwrap(), 0.0);
    }
}

#[test]
fn w2_closed_form_matches_references() {
    let a = DiagGaussian::new(vec![1.0, 0.0], vec![1.0, 2.0]).unwrap();
    let b = DiagGaussian::new(vec![0.0, 0.0], vec![2.0, 1.0]).unwrap();
    let exact = w2_diag_gaussian(&a, &b).unwrap();
    let grid = w2_quantile_grid(&a, &b, 100_000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sampled = w2_empirical_samples(&a, &b, 100_000, &mut rng).unwrap();
    assert!((grid - exact).abs() / exact < 0.02, "grid {grid} vs {exact}");
    assert!((sampled - exact).abs() / exact < 0.02, "sampled {sampled} vs {exact}");
}
