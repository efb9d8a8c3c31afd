//! Independent reference implementations used by several test targets.
#![allow(dead_code)]

use hires_vlm::eval::{CocoMetrics, DetPrediction, GtBox};
use hires_vlm::geometry::BoxNorm;

/// Plain intersection-over-union written out from the definition.
pub fn iou_ref(a: &BoxNorm, b: &BoxNorm) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.to_array();
    let [bx1, by1, bx2, by2] = b.to_array();
    let w = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let h = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = w * h;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union > 0.0 { inter / union } else { 0.0 }
}

/// Exhaustive reference for COCO box AP. Detections are ranked by
/// confidence (ties by image, then list position); each one is compared
/// against every ground-truth box of its image and takes the unclaimed one
/// with the highest IoU at or above the threshold (ties to the lower index).
/// The interpolated precision at recall r is the maximum precision over all
/// ranks whose recall reaches r, found by scanning every rank.
pub fn coco_oracle(preds: &[Vec<DetPrediction>], gts: &[Vec<GtBox>]) -> CocoMetrics {
    let mut cats: Vec<usize> = gts.iter().flatten().map(|g| g.category).collect();
    cats.sort();
    cats.dedup();
    if cats.is_empty() {
        return CocoMetrics::default();
    }
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut ap_sum = 0.0;
    let mut ap50 = 0.0;
    let mut ap75 = 0.0;
    let mut ar_sum = 0.0;
    for (ti, &t) in thresholds.iter().enumerate() {
        for &c in &cats {
            // (confidence, image, position, box)
            let mut dets: Vec<(f64, usize, usize, BoxNorm)> = Vec::new();
            for (img, p) in preds.iter().enumerate() {
                let mut mine: Vec<(f64, usize, usize, BoxNorm)> = p
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| d.category == c)
                    .map(|(k, d)| (d.confidence, img, k, d.bbox))
                    .collect();
                mine.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.2.cmp(&b.2)));
                mine.truncate(100);
                dets.extend(mine);
            }
            dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut claimed: Vec<(usize, usize)> = Vec::new();
            let n_gt: usize = gts.iter().map(|g| g.iter().filter(|x| x.category == c).count()).sum();
            let mut flags = Vec::new();
            for (_, img, _, b) in &dets {
                let mut best: Option<(usize, f64)> = None;
                let cands: Vec<(usize, &GtBox)> = gts[*img].iter().filter(|g| g.category == c).enumerate().collect();
                for (j, g) in cands {
                    if claimed.contains(&(*img, j)) {
                        continue;
                    }
                    let o = iou_ref(b, &g.bbox);
                    if o + 0.0 >= t {
                        match best {
                            Some((_, bo)) if bo >= o => {}
                            _ => best = Some((j, o)),
                        }
                    }
                }
                if let Some((j, _)) = best {
                    claimed.push((*img, j));
                    flags.push(true);
                } else {
                    flags.push(false);
                }
            }
            let mut precision = Vec::new();
            let mut recall = Vec::new();
            for k in 0..flags.len() {
                let tp = flags[..=k].iter().filter(|&&f| f).count() as f64;
                precision.push(tp / (k + 1) as f64);
                recall.push(if n_gt == 0 { 0.0 } else { tp / n_gt as f64 });
            }
            let mut ap = 0.0;
            for r in 0..=100 {
                let r = r as f64 / 100.0;
                let best = (0..flags.len()).filter(|&k| recall[k] >= r).map(|k| precision[k]).fold(0.0, f64::max);
                ap += best;
            }
            ap /= 101.0;
            ap_sum += ap;
            if ti == 0 {
                ap50 += ap;
            }
            if ti == 5 {
                ap75 += ap;
            }
            ar_sum += recall.last().copied().unwrap_or(0.0);
        }
    }
    let nc = cats.len() as f64;
    CocoMetrics { map: ap_sum / (10.0 * nc), ap50: ap50 / nc, ap75: ap75 / nc, ar100: ar_sum / (10.0 * nc) }
}
