use std::collections::{BTreeSet, HashMap};

use ambs_core::augment::{apply_crop, sample_crop_params, CropParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn crop_preserves_shape_values_and_is_deterministic(
        c in 1usize..4, h in 1usize..9, w in 1usize..9, pad in 0usize..5, seed in 0u64..1000,
        data in proptest::collection::vec(any::<u8>(), 256),
    ) {
        let obs = &data[..c * h * w];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = sample_crop_params(&mut rng, pad);
        let a = apply_crop(obs, [c, h, w], v, pad).unwrap();
        let b = apply_crop(obs, [c, h, w], v, pad).unwrap();
        prop_assert_eq!(a.len(), obs.len());
        prop_assert_eq!(&a, &b);
        let input: BTreeSet<u8> = obs.iter().copied().collect();
        prop_assert!(a.iter().all(|x| input.contains(x)));
    }

    #[test]
    fn constant_images_are_unchanged(value in any::<u8>(), row in 0usize..9, col in 0usize..9) {
        let obs = vec![value; 3 * 6 * 6];
        prop_assert_eq!(apply_crop(&obs, [3, 6, 6], CropParams { row, col }, 4).unwrap(), obs);
    }
}

#[test]
fn offsets_are_uniform_over_the_crop_space() {
    let pad = 4;
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts: HashMap<CropParams, usize> = HashMap::new();
    for _ in 0..draws {
        *counts.entry(sample_crop_params(&mut rng, pad)).or_default() += 1;
    }
    let cells = CropParams::space_size(pad);
    assert_eq!(cells, 81);
    assert_eq!(counts.len(), cells);
    let expect = draws as f64 / cells as f64;
    let sd = (expect * (1.0 - 1.0 / cells as f64)).sqrt();
    for (&v, &n) in &counts {
        assert!((n as f64 - expect).abs() <= 4.0 * sd, "{v:?}: {n}");
    }
    // Chi-square with 80 dof: mean 80, sd ≈ 12.6.
    let chi2: f64 = counts.values().map(|&n| (n as f64 - expect).powi(2) / expect).sum();
    assert!(chi2 < 80.0 + 5.0 * 12.65, "chi2 {chi2}");
}

#[test]
fn same_seed_same_sequence() {
    let mut a = ChaCha8Rng::seed_from_u64(9);
    let mut b = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        assert_eq!(sample_crop_params(&mut a, 2), sample_crop_params(&mut b, 2));
    }
}
