mod support;

use atlas_core::density::{density_extremes, fit_gmm, GmmConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use support::*;

fn config(components: usize, seed: u64) -> GmmConfig {
    GmmConfig { components, seed, tol: 1e-6, max_iter: 200, ridge: 1e-6 }
}

#[test]
fn likelihood_trace_never_decreases() {
    for seed in 0..10 {
        let mut g = rng(seed);
        let n = 150;
        let d = 1 + seed as usize % 4;
        let x = DMatrix::from_fn(n, d, |i, _| gaussian(&mut g, 1)[0] + (i % 3) as f64 * 2.0);
        for k in [1, 2, 4] {
            let m = fit_gmm(&x, &config(k, seed)).unwrap();
            for w in m.log_likelihood_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "seed {seed} k {k}: {w:?}");
            }
        }
    }
}

#[test]
fn recovers_planted_clusters() {
    let mut g = rng(4);
    let n = 400;
    let x = DMatrix::from_fn(n, 2, |i, j| {
        let center = if i < n / 2 { [-3.0, 0.0] } else { [3.0, 1.0] };
        center[j] + 0.5 * gaussian(&mut g, 1)[0]
    });
    let m = fit_gmm(&x, &config(2, 42)).unwrap();
    let mut means: Vec<(f64, f64)> = m.means.iter().map(|v| (v[0], v[1])).collect();
    means.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!((means[0].0 + 3.0).abs() < 0.1 && means[0].1.abs() < 0.1, "{means:?}");
    assert!((means[1].0 - 3.0).abs() < 0.1 && (means[1].1 - 1.0).abs() < 0.1, "{means:?}");
}

proptest! {
    #[test]
    fn flags_exact_tail_counts(seed in 0u64..10_000, n in 1usize..2000) {
        let mut g = rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| g.random_range(-10.0..10.0)).collect();
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let r = density_extremes(&ids, &scores, 0.025, 0.975).unwrap();
        let expect = (0.025 * n as f64 - 1e-9).ceil() as usize;
        prop_assert_eq!(r.sparse_ids.len(), expect.min(n));
        prop_assert_eq!(r.dense_ids.len(), expect.min(n));
    }
}

#[test]
fn small_samples_flag_one_per_side() {
    for n in 1..=41usize {
        let scores: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
        let ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let r = density_extremes(&ids, &scores, 0.025, 0.975).unwrap();
        let expect = if n <= 40 { 1 } else { 2 };
        assert_eq!((r.sparse_ids.len(), r.dense_ids.len()), (expect, expect), "n={n}");
        assert_eq!(r.sparse_ids[0], "0");
        assert_eq!(r.dense_ids.last().unwrap(), &(n - 1).to_string());
    }
}
