mod support;

use atlas_core::novelty::{bootstrap_baseline, novelty_series, yearly_novelty, NoveltyParams};
use support::*;

#[test]
fn k1_matches_full_distance_matrix() {
    let c = null_years(400, 100, 16, 1);
    for k in [1, 5] {
        let got = yearly_novelty(&c, 2002, k).unwrap();
        assert!((got - novelty_oracle(&c, 2002, k)).abs() < 1e-9);
    }
}

#[test]
fn null_years_fall_inside_bootstrap_interval() {
    let inside = (0..50)
        .filter(|&trial| {
            let c = null_years(500, 25, 8, 100 + trial);
            let nu = yearly_novelty(&c, 2002, 5).unwrap();
            let b = bootstrap_baseline(&c, 2002, 5, 200, 0.05, trial).unwrap();
            b.ci_low <= nu && nu <= b.ci_high
        })
        .count();
    assert!(inside >= 45, "inside {inside} of 50");
}

#[test]
fn far_cluster_ratio_exceeds_one_and_a_half() {
    let c = far_cluster_years(3);
    let report = novelty_series(&c, &NoveltyParams::default()).unwrap();
    assert_eq!(report.years.len(), 1);
    assert!(report.years[0].ratio.unwrap() > 1.5);
}

#[test]
fn seed_changes_draws_but_not_observed_value() {
    let c = null_years(200, 20, 8, 5);
    let a = novelty_series(&c, &NoveltyParams { seed: 1, ..Default::default() }).unwrap();
    let b = novelty_series(&c, &NoveltyParams { seed: 1, ..Default::default() }).unwrap();
    let other = novelty_series(&c, &NoveltyParams { seed: 2, ..Default::default() }).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.years[0].nu_observed, other.years[0].nu_observed);
    assert_ne!(a.years[0].nu_baseline_mean, other.years[0].nu_baseline_mean);
}
