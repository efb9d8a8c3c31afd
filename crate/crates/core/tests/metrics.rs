mod common;

use hires_vlm::eval::{coco_map, DetPrediction, GtBox};
use hires_vlm::geometry::BoxNorm;
use proptest::prelude::*;

fn grid_box() -> impl Strategy<Value = BoxNorm> {
    (0u8..=10, 0u8..=10, 1u8..=10, 1u8..=10).prop_filter_map("box inside canvas", |(x, y, w, h)| {
        let (x1, y1) = (x as f64 / 10.0, y as f64 / 10.0);
        BoxNorm::new(x1, y1, (x1 + w as f64 / 10.0).min(1.0), (y1 + h as f64 / 10.0).min(1.0)).ok()
    })
}

fn image() -> impl Strategy<Value = (Vec<DetPrediction>, Vec<GtBox>)> {
    let pred = (0usize..3, grid_box(), 1u8..=5).prop_map(|(category, bbox, c)| DetPrediction { category, bbox, confidence: c as f64 / 5.0 });
    let gt = (0usize..3, grid_box()).prop_map(|(category, bbox)| GtBox { category, bbox });
    (prop::collection::vec(pred, 0..=6), prop::collection::vec(gt, 0..=6))
}

fn scenario() -> impl Strategy<Value = (Vec<Vec<DetPrediction>>, Vec<Vec<GtBox>>)> {
    prop::collection::vec(image(), 1..=5).prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn coco_matches_brute_force((preds, gts) in scenario()) {
        let a = coco_map(&preds, &gts).unwrap();
        let b = common::coco_oracle(&preds, &gts);
        prop_assert!((a.map - b.map).abs() < 1e-9, "{a:?} vs {b:?}");
        prop_assert!((a.ap50 - b.ap50).abs() < 1e-9);
        prop_assert!((a.ap75 - b.ap75).abs() < 1e-9);
        prop_assert!((a.ar100 - b.ar100).abs() < 1e-9);
    }

    #[test]
    fn coco_depends_only_on_confidence_rank((preds, gts) in scenario()) {
        let a = coco_map(&preds, &gts).unwrap();
        let squashed: Vec<Vec<DetPrediction>> = preds
            .iter()
            .map(|p| p.iter().map(|d| DetPrediction { confidence: d.confidence.powi(3) * 0.5, ..*d }).collect())
            .collect();
        let b = coco_map(&squashed, &gts).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metrics_are_bounded((preds, gts) in scenario()) {
        let m = coco_map(&preds, &gts).unwrap();
        for v in [m.map, m.ap50, m.ap75, m.ar100] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.ap50 >= m.ap75 - 1e-12);
    }
}

#[test]
fn perfect_predictions_score_one() {
    let b = BoxNorm::new(0.1, 0.1, 0.4, 0.5).unwrap();
    let c = BoxNorm::new(0.5, 0.5, 0.9, 0.7).unwrap();
    let gts = vec![vec![GtBox { category: 0, bbox: b }, GtBox { category: 1, bbox: c }]];
    let preds = vec![vec![
        DetPrediction { category: 0, bbox: b, confidence: 0.9 },
        DetPrediction { category: 1, bbox: c, confidence: 0.8 },
    ]];
    let m = coco_map(&preds, &gts).unwrap();
    assert_eq!((m.map, m.ap50, m.ap75, m.ar100), (1.0, 1.0, 1.0, 1.0));
}
