use proptest::prelude::*;

use stcausal_core::causal::{derive_seed, ks_thresholds, ks_trajectories, one_sided_ks, DiffSummary, TrendSums};

fn sample() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, 1..40)
}

/// Brute-force one-sided distance over every pooled point.
fn brute_ks(a: &[f64], b: &[f64]) -> f64 {
    let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&x| cdf(a, x) - cdf(b, x))
        .fold(0.0, f64::max)
}

proptest! {
    #[test]
    fn ks_matches_brute_force(a in sample(), b in sample()) {
        let d = one_sided_ks(&a, &b).unwrap();
        prop_assert!((d - brute_ks(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn shifting_observed_side_never_decreases(a in sample(), b in sample()) {
        let base = one_sided_ks(&a, &b).unwrap();
        for c in [0.1, 1.0, 10.0] {
            let shifted: Vec<f64> = b.iter().map(|v| v + c).collect();
            prop_assert!(one_sided_ks(&a, &shifted).unwrap() >= base);
        }
    }

    #[test]
    fn thresholds_ignore_fit_order(
        fits in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 20), 2..6),
        rot in 0usize..6,
    ) {
        let k = fits.len();
        let sums: Vec<TrendSums> = fits.iter().map(|v| TrendSums::from_values(1, 1, vec![v.clone()])).collect();
        let mut permuted = sums.clone();
        permuted.rotate_left(rot % k);
        permuted.reverse();
        let a = ks_thresholds(&sums, 0.95).unwrap();
        let b = ks_thresholds(&permuted, 0.95).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn single_counterfactual_reduces_to_pairwise_distance() {
    let cf = TrendSums::from_values(1, 2, vec![vec![1.0, 3.0], vec![0.0, 1.0]]);
    let obs = TrendSums::from_values(1, 2, vec![vec![2.0, 4.0], vec![5.0, 6.0]]);
    let d = ks_trajectories(&obs, &[cf]).unwrap();
    assert_eq!(d[(0, 0)], 0.5);
    assert_eq!(d[(0, 1)], 1.0);
}

#[test]
fn threshold_is_nearest_rank() {
    // Two fits give two ordered-pair distances; the 95th percentile is the larger.
    let a = TrendSums::from_values(1, 1, vec![vec![0.0, 1.0, 2.0, 3.0]]);
    let b = TrendSums::from_values(1, 1, vec![vec![2.0, 3.0, 4.0, 5.0]]);
    let t = ks_thresholds(&[a, b], 0.95).unwrap();
    assert_eq!(t[(0, 0)], 0.5);
    let single = TrendSums::from_values(1, 1, vec![vec![0.0]]);
    assert!(ks_thresholds(&[single], 0.95).is_err());
}

#[test]
fn mismatched_trend_sums_are_rejected() {
    let a = TrendSums::from_values(1, 1, vec![vec![0.0]]);
    let b = TrendSums::from_values(1, 2, vec![vec![0.0], vec![1.0]]);
    assert!(ks_thresholds(&[a.clone(), b.clone()], 0.95).is_err());
    assert!(ks_trajectories(&a, &[b]).is_err());
}

#[test]
fn derived_seeds_are_distinct_and_stable() {
    let s: Vec<u64> = (0..100).map(|k| derive_seed(42, k)).collect();
    let mut u = s.clone();
    u.sort();
    u.dedup();
    assert_eq!(u.len(), s.len());
    assert_eq!(derive_seed(42, 7), s[7]);
    assert_ne!(derive_seed(43, 7), s[7]);
}

#[test]
fn interval_detection() {
    let d = DiffSummary {
        median: 1.0,
        lo95: 0.2,
        hi95: 2.0,
    };
    assert!(d.detects_impact());
    assert!((d.width() - 1.8).abs() < 1e-15);
    let z = DiffSummary { lo95: -0.1, ..d };
    assert!(!z.detects_impact());
}
