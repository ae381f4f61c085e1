mod support;

use proptest::prelude::*;
use wsshm::labels::AlphaMatte;
use wsshm::metrics::{image_metrics, MetricReport, PerImageMetrics};

#[test]
fn matches_per_pixel_oracle() {
    println!("{}", support::check_metric_oracle(100).unwrap());
}

#[test]
fn whole_equals_boundary_when_band_covers_everything() {
    println!("{}", support::check_whole_equals_boundary(20).unwrap());
}

#[test]
fn dominated_errors_score_no_worse() {
    println!("{}", support::check_metric_monotonicity(50).unwrap());
}

#[test]
fn golden_two_by_two() {
    let pred = AlphaMatte::filled(2, 2, 0.0);
    let gt = AlphaMatte::new(2, 2, vec![1.0, 1.0, 0.5, 0.0]).unwrap();
    let m = image_metrics(&pred, &gt).unwrap();
    assert!((m.mse_whole - 562.5).abs() < 1e-9);
    assert!((m.sad_whole - 0.0025).abs() < 1e-12);
    assert!((m.mse_boundary.unwrap() - 250.0).abs() < 1e-9);
    assert!((m.sad_boundary.unwrap() - 0.0005).abs() < 1e-12);
    assert!(image_metrics(&AlphaMatte::filled(2, 3, 0.0), &gt).is_err());
}

proptest! {
    #![proptest_config(support::proptest_config(256))]

    #[test]
    fn aggregates_ignore_image_order(vals in proptest::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), 1..12), rot in 0usize..12) {
        let per: Vec<PerImageMetrics> = vals
            .iter()
            .enumerate()
            .map(|(i, &(p, g))| PerImageMetrics {
                id: i.to_string(),
                metrics: image_metrics(&AlphaMatte::filled(2, 2, p), &AlphaMatte::filled(2, 2, g)).unwrap(),
            })
            .collect();
        let mut rotated = per.clone();
        rotated.rotate_left(rot % per.len());
        let (a, b) = (MetricReport::aggregate("x", per, 0), MetricReport::aggregate("x", rotated, 0));
        prop_assert!((a.mse_whole - b.mse_whole).abs() < 1e-9);
        prop_assert!((a.sad_whole - b.sad_whole).abs() < 1e-12);
        prop_assert_eq!(a.n_boundary_skipped, b.n_boundary_skipped);
        prop_assert_eq!(a.mse_boundary.is_some(), b.mse_boundary.is_some());
    }
}
