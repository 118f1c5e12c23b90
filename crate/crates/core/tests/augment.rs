use fewmax::augment::{apply_mask, blend_set, make_mask, make_mask_at, mri_augment, sample_lambda, AugPolicy};
use fewmax::data::SampleRecord;
use ndarray::Array3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn boundary_coefficients() {
    let one = make_mask_at(12, 9, 1.0, 3, 4).unwrap();
    assert!(one.mask.iter().all(|&m| m));
    assert_eq!(one.realized_lambda, 1.0);
    let zero = make_mask_at(12, 8, 0.0, 6, 4).unwrap();
    assert!(zero.mask.iter().all(|&m| !m));
    assert_eq!(zero.realized_lambda, 0.0);
    assert!(!zero.clipped);
}

#[test]
fn quarter_box_on_a_32_image() {
    let m = make_mask_at(32, 32, 0.75, 16, 16).unwrap();
    assert_eq!((m.region.height, m.region.width), (16, 16));
    assert_eq!(m.realized_lambda, 1.0 - 256.0 / 1024.0);
}

#[test]
fn blend_partners_differ_from_the_source() {
    let batch: Vec<Array3<f64>> = (0..4).map(|k| Array3::from_elem((6, 6, 1), k as f64)).collect();
    let policy = AugPolicy {
        blend_count: 8,
        ..AugPolicy::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..4 {
        for b in blend_set(&batch, i, &policy, &mut rng).unwrap() {
            assert_ne!(b.partner, i);
            let from_partner = b.mixed.iter().filter(|&&v| v == b.partner as f64).count();
            assert_eq!(from_partner, b.mask.region.area());
            assert_eq!(b.lam, b.mask.realized_lambda);
        }
    }
}

#[test]
fn beta_draws_stay_in_the_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for alpha in [0.2, 1.0, 5.0] {
        for _ in 0..500 {
            let l = sample_lambda(alpha, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&l));
        }
    }
    assert!(sample_lambda(0.0, &mut rng).is_err());
}

#[test]
fn complex_augmentation_preserves_relative_magnitude() {
    let t = Array3::from_shape_fn((4, 4, 2), |(y, x, c)| (y + 2 * x + c) as f64 * 0.1 + 0.05);
    let rec = SampleRecord::new("p", t, None, "knee").unwrap();
    let out = mri_augment(&rec, &AugPolicy::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let (a, b) = (rec.magnitude().unwrap(), out.magnitude().unwrap());
    let ratio = b[[0, 0]] / a[[0, 0]];
    assert!((0.8..=1.25).contains(&ratio));
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((y / x - ratio).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mask_geometry(h in 1usize..40, w in 1usize..40, lam in 0.0f64..=1.0, seed in any::<u64>()) {
        let m = make_mask(h, w, lam, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let r = m.region;
        prop_assert!(r.top + r.height <= h && r.left + r.width <= w);
        prop_assert_eq!(m.realized_lambda, 1.0 - r.area() as f64 / (h * w) as f64);
        prop_assert_eq!(m.mask.iter().filter(|&&v| !v).count(), r.area());
        if !m.clipped {
            let ratio = (1.0 - lam).sqrt();
            let bound = ratio * (h + w) as f64 / (h * w) as f64;
            prop_assert!((m.realized_lambda - lam).abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn mixed_pixels_follow_the_mask(lam in 0.0f64..=1.0, seed in any::<u64>()) {
        let xi = Array3::from_shape_fn((8, 7, 2), |(y, x, c)| (y * 7 + x) as f64 + c as f64 * 100.0);
        let xj = xi.mapv(|v| -v - 1.0);
        let m = make_mask(8, 7, lam, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mixed = apply_mask(&xi, &xj, &m).unwrap();
        for ((y, x, c), v) in mixed.indexed_iter() {
            let want = if m.mask[[y, x]] { xi[[y, x, c]] } else { xj[[y, x, c]] };
            prop_assert_eq!(*v, want);
        }
    }
}
