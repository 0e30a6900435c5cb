use ambs_core::diffcore::{finite_difference_check, Graph, ParamId, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Gradchecks `build` over parameters with the given shapes; returns max rel error.
fn check(shapes: &[(&[usize], f64, f64)], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamStore::<f64>::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, (s, lo, hi))| ps.add(format!("p{i}"), random(&mut rng, s, *lo, *hi)).unwrap())
        .collect();
    let report = finite_difference_check(&ps, &ids, 1e-5, 32, |s| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
        let out = build(&mut g, &vars);
        // Weighted sum so every output coordinate matters differently.
        let n = g.value(out).numel();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * (i % 7) as f64).collect();
        let wt = g.constant(Tensor::from_f64(g.shape(out), &w).unwrap());
        let prod = g.mul(out, wt).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item(), ids.iter().map(|&id| grads.wrt_param(id).cloned()).collect()))
    })
    .unwrap();
    assert!(report.non_finite.is_none(), "{report:?}");
    report.max_rel_error
}

#[test]
fn every_primitive_passes_gradcheck() {
    let tol = 1e-6;
    let cases: Vec<(&str, f64)> = vec![
        ("matmul", check(&[(&[3, 4], -1.0, 1.0), (&[4, 2], -1.0, 1.0)], |g, v| g.matmul(v[0], v[1]).unwrap())),
        (
            "conv2d s1",
            check(&[(&[2, 2, 5, 5], -1.0, 1.0), (&[3, 2, 3, 3], -1.0, 1.0), (&[3], -1.0, 1.0)], |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), 1).unwrap()
            }),
        ),
        (
            "conv2d s2",
            check(&[(&[1, 2, 7, 6], -1.0, 1.0), (&[2, 2, 3, 3], -1.0, 1.0)], |g, v| {
                g.conv2d(v[0], v[1], None, 2).unwrap()
            }),
        ),
        ("relu", check(&[(&[10], 0.1, 1.0)], |g, v| g.relu(v[0]).unwrap())),
        ("relu neg", check(&[(&[10], -1.0, -0.1)], |g, v| g.relu(v[0]).unwrap())),
        ("tanh", check(&[(&[6], -2.0, 2.0)], |g, v| g.tanh(v[0]).unwrap())),
        ("softmax", check(&[(&[3, 4], -2.0, 2.0)], |g, v| g.softmax(v[0]).unwrap())),
        ("exp", check(&[(&[5], -2.0, 2.0)], |g, v| g.exp(v[0]).unwrap())),
        ("log", check(&[(&[5], 0.5, 3.0)], |g, v| g.log(v[0]).unwrap())),
        ("sqrt", check(&[(&[5], 0.5, 3.0)], |g, v| g.sqrt(v[0]).unwrap())),
        ("square", check(&[(&[5], -2.0, 2.0)], |g, v| g.square(v[0]).unwrap())),
        ("abs", check(&[(&[8], 0.2, 2.0)], |g, v| {
            let n = g.scale(v[0], -1.0).unwrap();
            let c = g.concat(&[v[0], n], 0).unwrap();
            g.abs(c).unwrap()
        })),
        ("add bias", check(&[(&[3, 4], -1.0, 1.0), (&[4], -1.0, 1.0)], |g, v| g.add(v[0], v[1]).unwrap())),
        ("sub scalar", check(&[(&[3, 4], -1.0, 1.0), (&[1], -1.0, 1.0)], |g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul same", check(&[(&[3, 4], -1.0, 1.0), (&[3, 4], -1.0, 1.0)], |g, v| g.mul(v[0], v[1]).unwrap())),
        ("mul bias", check(&[(&[2, 3, 4], -1.0, 1.0), (&[3, 4], -1.0, 1.0)], |g, v| g.mul(v[0], v[1]).unwrap())),
        ("scale+shift", check(&[(&[4], -1.0, 1.0)], |g, v| {
            let s = g.scale(v[0], 2.5).unwrap();
            g.add_scalar(s, -0.7).unwrap()
        })),
        ("mean", check(&[(&[3, 4], -1.0, 1.0)], |g, v| g.mean(v[0]).unwrap())),
        ("sum_last", check(&[(&[3, 4], -1.0, 1.0)], |g, v| g.sum_last(v[0]).unwrap())),
        ("concat1", check(&[(&[2, 3], -1.0, 1.0), (&[2, 2], -1.0, 1.0)], |g, v| g.concat(&[v[0], v[1]], 1).unwrap())),
        ("min", check(&[(&[6], -1.0, 0.0), (&[6], 0.05, 1.0)], |g, v| {
            let a = g.min(v[0], v[1]).unwrap();
            let b = g.min(v[1], v[0]).unwrap();
            g.add(a, b).unwrap()
        })),
        (
            "gaussian sample",
            check(&[(&[2, 3], -1.0, 1.0), (&[2, 3], -1.0, 0.5), (&[2, 3], -1.0, 1.0)], |g, v| {
                g.gaussian_sample(v[0], v[1], v[2]).unwrap()
            }),
        ),
        (
            "gaussian log density",
            check(&[(&[2, 3], -1.0, 1.0), (&[2, 3], -1.0, 1.0), (&[2, 3], -1.0, 0.5)], |g, v| {
                g.gaussian_log_density(v[0], v[1], v[2]).unwrap()
            }),
        ),
        ("pad edge", check(&[(&[1, 2, 3, 4], -1.0, 1.0)], |g, v| g.pad_edge(v[0], 2).unwrap())),
        ("reshape+narrow", check(&[(&[2, 6], -1.0, 1.0)], |g, v| {
            let r = g.reshape(v[0], &[3, 4]).unwrap();
            g.narrow(r, 1, 2).unwrap()
        })),
        ("clamp", check(&[(&[6], -3.0, 3.0)], |g, v| g.clamp(v[0], -3.5, 3.5).unwrap())),
        ("gather rows", check(&[(&[3, 2], -1.0, 1.0)], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]).unwrap())),
    ];
    for (name, err) in &cases {
        assert!(*err <= tol, "{name}: relative error {err}");
    }
}

#[test]
fn gaussian_log_density_matches_closed_form() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[1, 2], &[0.5, -1.0]).unwrap());
    let m = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap());
    let ls = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 2f64.ln()]).unwrap());
    let lp = g.gaussian_log_density(x, m, ls).unwrap();
    let expect = -0.5 * 0.25 - 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * 0.25
        - 2f64.ln()
        - 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((g.value(lp).item() - expect).abs() < 1e-12);
}

#[test]
fn forward_replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f32>::new();
        let x = g.constant(random(&mut rng, &[2, 3, 9, 9], 0.0, 1.0).cast());
        let w = g.leaf(random(&mut rng, &[4, 3, 3, 3], -0.5, 0.5).cast(), true);
        let y = g.conv2d(x, w, None, 2).unwrap();
        let y = g.tanh(y).unwrap();
        let l = g.mean(y).unwrap();
        let grad = g.backward(l).unwrap().wrt(w).unwrap().clone();
        (g.value(y).clone(), grad)
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in proptest::collection::vec(-15.0f64..15.0, 1..12)) {
        let mut g = Graph::<f64>::new();
        let n = v.len();
        let x = g.constant(Tensor::from_f64(&[n], &v).unwrap());
        let s = g.softmax(x).unwrap();
        let p = g.value(s).data();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        // In f64 with inputs in ±15 every entry is strictly inside (0, 1) unless n == 1.
        for &pi in p {
            prop_assert!(pi > 0.0 && (pi < 1.0 || n == 1));
        }
    }

    #[test]
    fn backward_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xv = random(&mut rng, &[3, 4], -1.0, 1.0);
        let wv = random(&mut rng, &[4, 2], -1.0, 1.0);
        let grad_of = |ca: f64, cb: f64| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(xv.clone(), true);
            let w = g.constant(wv.clone());
            let h = g.matmul(x, w).unwrap();
            let t = g.tanh(h).unwrap();
            let l1 = g.mean(t).unwrap();
            let sq = g.square(x).unwrap();
            let l2 = g.sum(sq).unwrap();
            let s1 = g.scale(l1, ca).unwrap();
            let s2 = g.scale(l2, cb).unwrap();
            let l = g.add(s1, s2).unwrap();
            g.backward(l).unwrap().wrt(x).unwrap().clone()
        };
        let combo = grad_of(a, b);
        let g1 = grad_of(1.0, 0.0);
        let g2 = grad_of(0.0, 1.0);
        for i in 0..combo.numel() {
            let lin = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((combo.data()[i] - lin).abs() < 1e-6);
        }
    }
}
