mod support;

use atlas_core::similarity::{frechet_distance, frechet_parts, trace_sqrt_product, GaussianSummary, SimilarityMatrix};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use support::*;

fn summary(name: &str, mu: &[f64], sigma: DMatrix<f64>) -> GaussianSummary {
    GaussianSummary { dataset: name.into(), n: 10, mu: DVector::from_column_slice(mu), sigma }
}

fn random_spd(d: usize, seed: u64) -> DMatrix<f64> {
    let mut g = rng(seed);
    let a = DMatrix::from_fn(d, d, |_, _| gaussian(&mut g, 1)[0]);
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

#[test]
fn one_dimensional_closed_form() {
    let a = summary("a", &[0.0], DMatrix::from_element(1, 1, 1.0));
    let b = summary("b", &[3.0], DMatrix::from_element(1, 1, 4.0));
    assert!((frechet_distance(&a, &b).unwrap() - 10.0).abs() < 1e-8);
}

#[test]
fn trace_sqrt_matches_product_eigenvalues() {
    for d in 1..=16 {
        let (a, b) = (random_spd(d, d as u64), random_spd(d, 100 + d as u64));
        let oracle: f64 = (&a * &b).complex_eigenvalues().iter().map(|z| z.re.max(0.0).sqrt()).sum();
        let got = trace_sqrt_product(&a, &b);
        assert!((got - oracle).abs() < 1e-6 * oracle.max(1.0), "d={d}: {got} vs {oracle}");
    }
}

#[test]
fn matrix_symmetric_with_zero_diagonal() {
    for seed in 0..5 {
        let summaries: Vec<GaussianSummary> = (0..5)
            .map(|i| {
                let mut g = rng(seed * 10 + i);
                summary(&format!("d{i}"), &gaussian(&mut g, 4), random_spd(4, seed * 100 + i))
            })
            .collect();
        let m = SimilarityMatrix::from_summaries(&summaries).unwrap();
        for i in 0..5 {
            assert!(m.fd[i][i].abs() < 1e-9);
            for j in 0..5 {
                assert_eq!(m.fd[i][j], m.fd[j][i]);
            }
        }
    }
}

proptest! {
    #[test]
    fn fd_nonnegative_and_mean_term_exact(seed in 0u64..5000, d in 1usize..8) {
        let mut g = rng(seed);
        let a = summary("a", &gaussian(&mut g, d), random_spd(d, seed));
        let b = summary("b", &gaussian(&mut g, d), random_spd(d, seed + 1));
        let p = frechet_parts(&a, &b).unwrap();
        prop_assert!(p.value >= 0.0);
        prop_assert!((p.mean_term - (&a.mu - &b.mu).norm_squared()).abs() < 1e-12);
    }
}
