//! Detection evaluation: score-thresholded BEV NMS and 101-point interpolated
//! average precision.

use alloc::vec;
use alloc::vec::Vec;

use crate::boxes::{rotated_iou_bev, BoxLabel, BoxPrediction};
use crate::error::{Error, Result};
use crate::par;

/// Total order used to sort predictions: score descending, then decoded
/// center (and remaining geometry) lexicographically ascending.
fn pred_order(a: &BoxPrediction, b: &BoxPrediction) -> core::cmp::Ordering {
    let (_, sa) = a.best_class();
    let (_, sb) = b.best_class();
    sb.total_cmp(&sa)
        .then(a.cx.total_cmp(&b.cx))
        .then(a.cy.total_cmp(&b.cy))
        .then(a.cz.total_cmp(&b.cz))
        .then(a.l.total_cmp(&b.l))
        .then(a.w.total_cmp(&b.w))
        .then(a.h.total_cmp(&b.h))
        .then(a.yaw.total_cmp(&b.yaw))
}

/// Greedy descending-score suppression with rotated BEV IoU. Predictions
/// below `score_thresh` are dropped first; a surviving box suppresses any
/// lower-ranked box overlapping it with IoU >= `iou_thresh`.
pub fn nms_bev(
    preds: &[BoxPrediction],
    iou_thresh: f64,
    score_thresh: f64,
) -> Result<Vec<BoxPrediction>> {
    for t in [iou_thresh, score_thresh] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Invalid("NMS thresholds must lie in [0, 1]".into()));
        }
    }
    let mut sorted: Vec<BoxPrediction> = preds
        .iter()
        .filter(|p| p.best_class().1 >= score_thresh)
        .cloned()
        .collect();
    sorted.sort_by(pred_order);
    let mut kept: Vec<BoxPrediction> = Vec::new();
    for cand in sorted {
        let cl = cand.to_label();
        let suppressed = kept
            .iter()
            .any(|k| rotated_iou_bev(&k.to_label(), &cl) >= iou_thresh);
        if !suppressed {
            kept.push(cand);
        }
    }
    Ok(kept)
}

/// Precision/recall curve at one IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub iou_thresh: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Per-class evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEval {
    pub class_id: usize,
    pub gt_count: usize,
    pub pred_count: usize,
    /// `(iou_thresh, ap)` pairs; `ap` is `None` when the class has no ground
    /// truth anywhere.
    pub ap: Vec<(f64, Option<f64>)>,
    pub curves: Vec<PrCurve>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub classes: Vec<ClassEval>,
}

impl EvalResult {
    /// AP of one class at one threshold.
    pub fn ap_of(&self, class_id: usize, iou_thresh: f64) -> Option<f64> {
        self.classes
            .iter()
            .find(|c| c.class_id == class_id)
            .and_then(|c| {
                c.ap.iter()
                    .find(|(t, _)| *t == iou_thresh)
                    .and_then(|(_, ap)| *ap)
            })
    }

    /// Mean AP at one threshold over classes that have ground truth.
    pub fn mean_ap(&self, iou_thresh: f64) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for c in &self.classes {
            if let Some(ap) = c
                .ap
                .iter()
                .find(|(t, _)| *t == iou_thresh)
                .and_then(|(_, ap)| *ap)
            {
                sum += ap;
                count += 1;
            }
        }
        if count == 0 {
            None
        } else {
            Some(sum / count as f64)
        }
    }
}

/// 101-point interpolated AP from a TP/FP record list sorted by score.
fn interpolated_ap(records: &[(f64, bool)], gt_count: usize) -> f64 {
    if gt_count == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(records.len());
    let mut precision = Vec::with_capacity(records.len());
    let mut tp = 0usize;
    for (i, &(_, is_tp)) in records.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    let mut ap = 0.0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        let mut best = 0.0f64;
        for i in 0..recall.len() {
            if recall[i] >= r - 1e-12 {
                best = best.max(precision[i]);
            }
        }
        ap += best;
    }
    ap / 101.0
}

fn pr_curve(records: &[(f64, bool)], gt_count: usize, iou_thresh: f64) -> PrCurve {
    let mut recall = Vec::with_capacity(records.len());
    let mut precision = Vec::with_capacity(records.len());
    let mut tp = 0usize;
    for (i, &(_, is_tp)) in records.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        recall.push(if gt_count == 0 {
            0.0
        } else {
            tp as f64 / gt_count as f64
        });
        precision.push(tp as f64 / (i + 1) as f64);
    }
    PrCurve {
        iou_thresh,
        recall,
        precision,
    }
}

/// Matches one scene's predictions of one class to its ground truths:
/// descending score, each prediction takes the unmatched GT with the highest
/// IoU >= threshold. Returns `(score, is_tp)` records.
fn match_scene(
    preds: &[&BoxPrediction],
    gts: &[&BoxLabel],
    iou_thresh: f64,
) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| pred_order(preds[a], preds[b]));
    let mut gt_used = vec![false; gts.len()];
    let mut records = Vec::with_capacity(preds.len());
    for &pi in &order {
        let pl = preds[pi].to_label();
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_used[gi] {
                continue;
            }
            let iou = rotated_iou_bev(&pl, gt);
            if iou >= iou_thresh {
                let better = match best {
                    Some((b, _)) => iou > b,
                    None => true,
                };
                if better {
                    best = Some((iou, gi));
                }
            }
        }
        let is_tp = if let Some((_, gi)) = best {
            gt_used[gi] = true;
            true
        } else {
            false
        };
        records.push((preds[pi].best_class().1, is_tp));
    }
    records
}

/// Standard AP evaluation over aligned per-scene prediction and ground-truth
/// lists. Predictions carry their class as the argmax score.
pub fn evaluate(
    preds_per_scene: &[Vec<BoxPrediction>],
    gts_per_scene: &[Vec<BoxLabel>],
    iou_thresholds: &[f64],
    num_classes: usize,
) -> Result<EvalResult> {
    if preds_per_scene.len() != gts_per_scene.len() {
        return Err(Error::DimensionMismatch {
            context: "evaluate scene lists",
            expected: gts_per_scene.len(),
            got: preds_per_scene.len(),
        });
    }
    let classes = par::map_indexed(num_classes, 1, |class_id| {
        let mut gt_count = 0usize;
        let mut pred_count = 0usize;
        let mut ap = Vec::with_capacity(iou_thresholds.len());
        let mut curves = Vec::with_capacity(iou_thresholds.len());
        for &thresh in iou_thresholds {
            // Per-scene matching, global score-sorted aggregation.
            let mut records: Vec<(f64, bool)> = Vec::new();
            let mut total_gt = 0usize;
            let mut total_pred = 0usize;
            for (preds, gts) in preds_per_scene.iter().zip(gts_per_scene.iter()) {
                let cp: Vec<&BoxPrediction> = preds
                    .iter()
                    .filter(|p| p.best_class().0 == class_id)
                    .collect();
                let cg: Vec<&BoxLabel> = gts.iter().filter(|g| g.class_id == class_id).collect();
                total_gt += cg.len();
                total_pred += cp.len();
                records.extend(match_scene(&cp, &cg, thresh));
            }
            records.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            gt_count = total_gt;
            pred_count = total_pred;
            let ap_value = if total_gt == 0 {
                None
            } else {
                Some(interpolated_ap(&records, total_gt))
            };
            ap.push((thresh, ap_value));
            curves.push(pr_curve(&records, total_gt, thresh));
        }
        ClassEval {
            class_id,
            gt_count,
            pred_count,
            ap,
            curves,
        }
    });
    Ok(EvalResult { classes })
}
