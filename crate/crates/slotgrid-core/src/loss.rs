//! Detection losses: quality focal classification and the rotation-weighted
//! IoU regression loss.
//!
//! These are the plain scalar forms used by the label assigner (which never
//! differentiates them). The training graph rebuilds the same formulas from
//! tape primitives; value-equality between the two paths is covered by tests.

use crate::boxes::{BoxLabel, BoxPrediction};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Matrix;

/// Focusing exponent of the focal loss.
pub const FOCAL_GAMMA: f64 = 2.0;

const SCORE_CLAMP: f64 = 1e-12;

/// Quality-focal term for one score/target pair:
/// `|t - s|^gamma * -(t*ln(s) + (1-t)*ln(1-s))`.
pub fn focal_element(score: f64, target: f64) -> f64 {
    let s = score.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    let weight = math::powi(math::abs(target - s), FOCAL_GAMMA as i32);
    let ce = -(target * math::ln(s) + (1.0 - target) * math::ln(1.0 - s));
    weight * ce
}

/// Focal loss over a score/target matrix, summed in canonical row-major order
/// and normalized by the number of exact-1 targets (minimum divisor 1).
pub fn focal_loss(scores: &Matrix, targets: &Matrix) -> Result<f64> {
    if scores.shape() != targets.shape() {
        return Err(Error::DimensionMismatch {
            context: "focal loss shapes",
            expected: targets.rows() * targets.cols(),
            got: scores.rows() * scores.cols(),
        });
    }
    let mut total = 0.0;
    let mut positives = 0usize;
    for (&s, &t) in scores.data().iter().zip(targets.data().iter()) {
        total += focal_element(s, t);
        if t == 1.0 {
            positives += 1;
        }
    }
    Ok(total / positives.max(1) as f64)
}

/// Axis-aligned interval overlap length.
#[inline]
fn overlap(lo_a: f64, hi_a: f64, lo_b: f64, hi_b: f64) -> f64 {
    (hi_a.min(hi_b) - lo_a.max(lo_b)).max(0.0)
}

/// The pieces of the rotation-weighted IoU, exposed so the assigner's cost
/// and the loss share one geometry.
pub fn rw_iou(pred: &BoxPrediction, gt: &BoxLabel) -> f64 {
    // Re-express the prediction center in the ground truth's yaw-aligned
    // frame; the prediction is treated as axis-aligned there.
    let (s, c) = (math::sin(gt.yaw), math::cos(gt.yaw));
    let dx = pred.cx - gt.cx;
    let dy = pred.cy - gt.cy;
    let px = c * dx + s * dy;
    let py = -s * dx + c * dy;

    let ox = overlap(
        px - pred.l * 0.5,
        px + pred.l * 0.5,
        -gt.l * 0.5,
        gt.l * 0.5,
    );
    let oy = overlap(
        py - pred.w * 0.5,
        py + pred.w * 0.5,
        -gt.w * 0.5,
        gt.w * 0.5,
    );
    let oz = overlap(
        pred.cz - pred.h * 0.5,
        pred.cz + pred.h * 0.5,
        gt.cz - gt.h * 0.5,
        gt.cz + gt.h * 0.5,
    );
    let inter = ox * oy * oz;
    let union = pred.l * pred.w * pred.h + gt.l * gt.w * gt.h - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };

    let rho = 0.5 * (1.0 + math::cos(2.0 * (pred.yaw - gt.yaw)));
    iou * rho
}

/// Rotation-weighted IoU loss: `1 - IoU_aligned * rho(dyaw)`, zero exactly
/// when the boxes coincide, one when they are disjoint or the yaw error is
/// a quarter turn.
pub fn rw_iou_loss(pred: &BoxPrediction, gt: &BoxLabel) -> f64 {
    1.0 - rw_iou(pred, gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn pred_from(gt: &BoxLabel) -> BoxPrediction {
        BoxPrediction {
            cx: gt.cx,
            cy: gt.cy,
            cz: gt.cz,
            l: gt.l,
            w: gt.w,
            h: gt.h,
            yaw: gt.yaw,
            scores: vec![1.0],
        }
    }

    #[test]
    fn focal_single_element_matches_formula() {
        // target=1, score=0.5: -(0.5)^2 * ln(0.5) = 0.25 * ln(2).
        let got = focal_element(0.5, 1.0);
        let expected = -0.25 * math::ln(0.5);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn focal_zero_residual_limit() {
        // score == target at the clamp boundary: loss collapses toward zero.
        let eps = 1e-6;
        let scores = Matrix::from_vec(1, 2, vec![1.0 - eps, eps]);
        let targets = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
        let loss = focal_loss(&scores, &targets).unwrap();
        assert!(loss < 1e-11, "near-perfect predictions should vanish, got {loss}");
    }

    #[test]
    fn focal_normalizes_by_positive_count() {
        let scores = Matrix::from_vec(2, 1, vec![0.5, 0.5]);
        let targets = Matrix::from_vec(2, 1, vec![1.0, 1.0]);
        let per_elem = focal_element(0.5, 1.0);
        let loss = focal_loss(&scores, &targets).unwrap();
        assert!((loss - per_elem).abs() < 1e-12);
    }

    #[test]
    fn focal_rejects_shape_mismatch() {
        let scores = Matrix::zeros(2, 2);
        let targets = Matrix::zeros(2, 3);
        assert!(focal_loss(&scores, &targets).is_err());
    }

    #[test]
    fn rw_loss_zero_at_equality() {
        let gt = BoxLabel::new(1.0, 2.0, 0.8, 4.0, 2.0, 1.5, 0.9, 0).unwrap();
        assert!(rw_iou_loss(&pred_from(&gt), &gt).abs() < 1e-12);
    }

    #[test]
    fn rw_loss_one_at_quarter_turn() {
        let gt = BoxLabel::new(0.0, 0.0, 0.5, 2.0, 2.0, 1.0, 0.0, 0).unwrap();
        let mut p = pred_from(&gt);
        p.yaw = core::f64::consts::FRAC_PI_2;
        assert!((rw_iou_loss(&p, &gt) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rw_loss_bounded_and_monotone_in_center_offset() {
        let gt = BoxLabel::new(0.0, 0.0, 0.75, 4.0, 2.0, 1.5, 0.3, 0).unwrap();
        for axis in 0..2 {
            let mut last = -1.0;
            for step in 0..40 {
                let off = step as f64 * 0.2;
                let mut p = pred_from(&gt);
                if axis == 0 {
                    p.cx += off;
                } else {
                    p.cy += off;
                }
                let loss = rw_iou_loss(&p, &gt);
                assert!((0.0..=1.0).contains(&loss));
                assert!(
                    loss >= last - 1e-12,
                    "loss must not decrease as the center moves away"
                );
                last = loss;
            }
        }
    }

    #[test]
    fn rw_loss_uses_vertical_overlap() {
        let gt = BoxLabel::new(0.0, 0.0, 0.5, 2.0, 2.0, 1.0, 0.0, 0).unwrap();
        let mut p = pred_from(&gt);
        p.cz += 5.0; // no vertical overlap
        assert!((rw_iou_loss(&p, &gt) - 1.0).abs() < 1e-12);
    }
}
