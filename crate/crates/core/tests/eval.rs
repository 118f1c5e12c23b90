mod common;

use common::unit_rows;
use fewmax::eval::{hyperspherical_energy, knn_retrieve, linear_probe, nrmse, EnergyReport, MemoryBank, ProbeConfig};
use fewmax::Error;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn double_loop(z: &Array2<f64>, s: u32) -> f64 {
    let n = z.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut d2 = 0.0;
            for k in 0..z.ncols() {
                d2 += (z[[i, k]] - z[[j, k]]).powi(2);
            }
            let d = d2.sqrt();
            total += match s {
                0 => (1.0 / d).ln(),
                _ => d.powi(-(s as i32)),
            };
        }
    }
    total
}

#[test]
fn antipodal_pair_energies() {
    let z = array![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
    let r = EnergyReport::compute(z.view()).unwrap();
    assert!((r.e0 + 2.0 * 2f64.ln()).abs() < 1e-12);
    assert_eq!(r.e1, 1.0);
    assert_eq!(r.e2, 0.5);
}

#[test]
fn energy_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [2, 7, 33, 64] {
        let z = unit_rows(&mut rng, n, 8);
        for s in 0..=2 {
            let got = hyperspherical_energy(z.view(), s).unwrap();
            let want = double_loop(&z, s);
            assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0), "n {n} s {s}");
        }
    }
}

#[test]
fn duplicate_points_are_singular() {
    let z = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
    assert!(matches!(hyperspherical_energy(z.view(), 1), Err(Error::Singularity { i: 0, j: 2 })));
}

#[test]
fn three_point_bank_ordering() {
    let s = 0.5f64.sqrt();
    let bank = MemoryBank::new(
        array![[1.0, 0.0], [0.0, 1.0], [s, s]],
        vec!["east".into(), "north".into(), "diag".into()],
    )
    .unwrap();
    let q = array![0.8, 0.6];
    let got = knn_retrieve(&bank, q.view(), 3).unwrap();
    let ids: Vec<&str> = got.iter().map(|n| n.id.as_str()).collect();
    // distances: diag sqrt(2-2(0.8s+0.6s)) < east sqrt(0.4) < north sqrt(0.8)
    assert_eq!(ids, ["diag", "east", "north"]);
    assert!((got[1].distance - 0.4f64.sqrt()).abs() < 1e-12);
    assert!(matches!(knn_retrieve(&bank, q.view(), 4), Err(Error::Capacity(_))));
}

#[test]
fn self_query_is_at_distance_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = unit_rows(&mut rng, 20, 6);
    let ids: Vec<String> = (0..20).map(|i| format!("s{i:02}")).collect();
    let bank = MemoryBank::new(z.clone(), ids.clone()).unwrap();
    for i in 0..20 {
        let got = knn_retrieve(&bank, z.row(i), 5).unwrap();
        assert_eq!(got.len(), 5);
        assert_eq!(got[0].id, ids[i]);
        assert_eq!(got[0].distance, 0.0);
    }
}

#[test]
fn nrmse_identities() {
    let x = array![[0.3, 1.0], [2.0, 0.5]];
    assert_eq!(nrmse(x.view(), x.view()), Some(0.0));
    assert_eq!(nrmse(Array2::zeros((2, 2)).view(), x.view()), Some(1.0));
    assert_eq!(nrmse((&x * 2.0).view(), x.view()), Some(1.0));
}

#[test]
fn linear_probe_separates_separable_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let centers = unit_rows(&mut rng, 4, 5) * 4.0;
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        let noise = unit_rows(rng, n, 5) * 0.3;
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let x = Array2::from_shape_fn((n, 5), |(i, k)| centers[[labels[i], k]] + noise[[i, k]]);
        (x, labels)
    };
    let (xtr, ytr) = make(40, &mut rng);
    let (xte, yte) = make(20, &mut rng);
    let r = linear_probe(xtr.view(), &ytr, xte.view(), &yte, &ProbeConfig::default(), 0).unwrap();
    assert_eq!(r.top1, 100.0);
    let missing: Vec<usize> = ytr.iter().map(|&y| y.min(2)).collect();
    assert!(matches!(
        linear_probe(xtr.view(), &missing, xte.view(), &yte, &ProbeConfig::default(), 0),
        Err(Error::LabelCoverage(3))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn energy_is_permutation_invariant(seed in any::<u64>(), n in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = unit_rows(&mut rng, n, 4);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let p = Array2::from_shape_fn(z.raw_dim(), |(i, k)| z[[perm[i], k]]);
        for s in 0..=2 {
            let a = hyperspherical_energy(z.view(), s).unwrap();
            let b = hyperspherical_energy(p.view(), s).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn knn_agrees_with_exhaustive_sort(seed in any::<u64>(), n in 1usize..30, k in 1usize..30) {
        let k = k.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = unit_rows(&mut rng, n, 3);
        let ids: Vec<String> = (0..n).map(|i| format!("{i:03}")).collect();
        let bank = MemoryBank::new(z.clone(), ids.clone()).unwrap();
        let q = unit_rows(&mut rng, 1, 3);
        let got = knn_retrieve(&bank, q.row(0), k).unwrap();
        let mut all: Vec<(f64, String)> = (0..n)
            .map(|i| ((&z.row(i) - &q.row(0)).mapv(|v| v * v).sum().sqrt(), ids[i].clone()))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        for (g, (d, id)) in got.iter().zip(&all) {
            prop_assert_eq!(&g.id, id);
            prop_assert!((g.distance - d).abs() < 1e-12);
        }
    }
}
