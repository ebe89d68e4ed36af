mod common;

use egmf::metrics::{accuracy, mae, pearson, per_class_f1, sentiment_metrics, weighted_f1, MetricReport};
use egmf::prompt::ScoreFormat;
use egmf::vocab::Vocab;
use proptest::prelude::*;

#[test]
fn metric_oracles_agree() {
    common::metric_oracles(1000).unwrap();
}

#[test]
fn score_round_trip_and_fallback() {
    common::score_round_trip().unwrap();
}

#[test]
fn single_class_predictions_against_uniform_golds() {
    let golds: Vec<usize> = (0..7).flat_map(|c| [c; 3]).collect();
    let preds = vec![4; 21];
    // only class 4 scores: P = 3/21, R = 1, F1 = 2·(1/7)/(1/7 + 1) = 1/4, weight 1/7
    assert!((weighted_f1(&preds, &golds, 7).unwrap() - 0.25 / 7.0).abs() < 1e-15);
    assert_eq!(per_class_f1(&preds, &golds, 7).unwrap().iter().filter(|&&f| f > 0.0).count(), 1);
}

#[test]
fn report_fields_follow_the_task() {
    let c = MetricReport::classification(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
    assert!(c.mae.is_none() && c.acc7.is_none());
    assert!((c.weighted_f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    let r = MetricReport::regression(&[0.1, -0.2], &[0.3, 0.0], [-1.0, 1.0], 1, 0).unwrap();
    assert!(r.acc7.is_none() && r.per_class_f1.is_none());
    assert_eq!(r.parse_failure_rate, Some(0.5));
    let r3 = MetricReport::regression(&[0.1, -0.2], &[0.3, 0.0], [-3.0, 3.0], 0, 0).unwrap();
    assert!(r3.acc7.is_some());
}

fn labels(n: usize) -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
    (2..=n).prop_flat_map(|k| {
        (1usize..50).prop_flat_map(move |len| {
            (Just(k), prop::collection::vec(0..k, len), prop::collection::vec(0..k, len))
        })
    })
}

fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|len| (prop::collection::vec(-3.0f64..3.0, len), prop::collection::vec(-3.0f64..3.0, len)))
}

proptest! {
    #[test]
    fn perfect_predictions_score_one((k, _, golds) in labels(8)) {
        prop_assert_eq!(accuracy(&golds, &golds).unwrap(), 1.0);
        prop_assert!((weighted_f1(&golds, &golds, k).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_f1_is_a_probability((k, preds, golds) in labels(8)) {
        let f = weighted_f1(&preds, &golds, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn pearson_ignores_positive_affine_maps((p, g) in scores(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let q: Vec<f64> = p.iter().map(|x| a * x + b).collect();
        prop_assert!((pearson(&p, &g).unwrap() - pearson(&q, &g).unwrap()).abs() < 1e-12);
        let r = pearson(&p, &g).unwrap();
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn mae_detects_translation((p, g) in scores(), c in 0.0f64..2.0) {
        let above: Vec<f64> = p.iter().zip(&g).map(|(x, y)| x.max(*y)).collect();
        let shifted: Vec<f64> = above.iter().map(|x| x + c).collect();
        let d = mae(&shifted, &g).unwrap() - mae(&above, &g).unwrap();
        prop_assert!((d - c).abs() < 1e-12);
    }

    #[test]
    fn sentiment_metrics_stay_in_range((p, g) in scores()) {
        let m = sentiment_metrics(&p, &g, [-3.0, 3.0]).unwrap();
        for v in [m.acc2.unwrap_or(0.5), m.acc2_weak, m.acc7.unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.mae >= 0.0);
    }

    #[test]
    fn grid_scores_round_trip(i in -30i32..=30, wide in any::<bool>()) {
        let vocab = Vocab::standard(64).unwrap();
        let (range, v) = if wide { ([-3.0, 3.0], i as f64 / 10.0) } else { ([-1.0, 1.0], (i % 11) as f64 / 10.0) };
        let fmt = ScoreFormat::new(range, 0.1).unwrap();
        let text = fmt.decode(&fmt.encode(v, &vocab).unwrap(), &vocab).unwrap();
        prop_assert_eq!(text.len(), fmt.width());
        let parsed = fmt.parse(&text);
        prop_assert_eq!(parsed.value, v);
        prop_assert!(!parsed.parse_failure && !parsed.clamped);
    }

    #[test]
    fn parsing_never_leaves_the_range(text in "[+\\-.0-9]{0,6}") {
        let fmt = ScoreFormat::new([-1.0, 1.0], 0.1).unwrap();
        let p = fmt.parse(&text);
        prop_assert!((-1.0..=1.0).contains(&p.value));
        if p.parse_failure {
            prop_assert_eq!(p.value, 0.0);
        }
    }
}
