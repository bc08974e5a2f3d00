//! Dynamic sparse label assignment.
//!
//! For each ground-truth box: take the `n` voxels nearest its BEV center,
//! score each candidate with a selection cost (classification focal term plus
//! a weighted regression term), pick `k` adaptively from the summed candidate
//! IoUs, and select the `k` lowest-cost candidates as positives. Voxels
//! claimed by several boxes go to the lowest-cost claimant and losers fall
//! back to their next-best candidates; the resolution is a deterministic
//! greedy pass over all (box, candidate) pairs in ascending cost order.
//!
//! Classification targets are heatmap-style soft targets: 1 at positives for
//! the box's class, the candidate IoU at non-positive candidates, 0 elsewhere.

use alloc::vec;
use alloc::vec::Vec;

use crate::boxes::{rotated_iou_bev, BoxLabel, BoxPrediction};
use crate::error::{Error, Result};
use crate::loss::{focal_element, rw_iou_loss};
use crate::math;
use crate::sparse::SparseTensor;
use crate::tensor::Matrix;

/// Assignment hyperparameters: candidate count and regression-cost weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignConfig {
    pub n: usize,
    pub lambda: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig { n: 5, lambda: 2.0 }
    }
}

/// Per-ground-truth assignment record.
#[derive(Debug, Clone, PartialEq)]
pub struct GtAssignment {
    /// Row indices of the `n` nearest candidates, nearest first
    /// (ties by row index ascending).
    pub candidate_rows: Vec<usize>,
    /// Selection cost per candidate, aligned with `candidate_rows`.
    pub selection_costs: Vec<f64>,
    /// BEV IoU between each candidate's prediction and the ground truth.
    pub candidate_ious: Vec<f64>,
    /// Adaptive positive count.
    pub k: usize,
    /// Rows selected as positives after conflict resolution, ascending.
    pub positive_rows: Vec<usize>,
}

/// Full assignment: per-box records, the flat positive list, and the
/// soft classification target matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub per_gt: Vec<GtAssignment>,
    /// `(row, gt_index)` pairs sorted by row index.
    pub positives: Vec<(usize, usize)>,
    /// `N x num_classes` soft targets in `[0, 1]`.
    pub cls_target: Matrix,
}

/// Rows of the `n` voxels closest (BEV, meters) to the box center; ties break
/// by row index ascending. Returns all rows when fewer than `n` exist.
pub fn nearest_candidates(voxels: &SparseTensor, gt: &BoxLabel, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Invalid("candidate count must be >= 1".into()));
    }
    if voxels.is_empty() {
        return Err(Error::EmptyInput("nearest_candidates on an empty tensor"));
    }
    let mut by_dist: Vec<(f64, usize)> = (0..voxels.len())
        .map(|row| {
            let (cx, cy) = voxels.row_center(row);
            let dx = cx - gt.cx;
            let dy = cy - gt.cy;
            (math::sqrt(dx * dx + dy * dy), row)
        })
        .collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(by_dist.into_iter().take(n).map(|(_, row)| row).collect())
}

/// Selection cost: focal classification term for the box's class against
/// target 1, plus `lambda` times the rotation-weighted IoU loss.
pub fn selection_cost(pred: &BoxPrediction, gt: &BoxLabel, lambda: f64) -> f64 {
    let score = pred.scores.get(gt.class_id).copied().unwrap_or(0.0);
    focal_element(score, 1.0) + lambda * rw_iou_loss(pred, gt)
}

/// Adaptive positive count: `max(floor(sum of IoUs), 1)`, clamped to the
/// candidate count.
pub fn adaptive_k(ious: &[f64]) -> usize {
    let sum: f64 = ious.iter().sum();
    let k = math::floor(sum) as usize;
    k.max(1).min(ious.len().max(1))
}

/// Ceiling below 1.0 for soft targets at non-positive candidates.
const SOFT_TARGET_MAX: f64 = 1.0 - 1e-9;

/// Runs the full assignment over one scene.
///
/// `preds` must be row-aligned with `voxels`. Empty `gts` yields an empty
/// assignment with an all-zero target matrix.
pub fn dynamic_assign(
    voxels: &SparseTensor,
    preds: &[BoxPrediction],
    gts: &[BoxLabel],
    cfg: &AssignConfig,
    num_classes: usize,
) -> Result<AssignmentResult> {
    if preds.len() != voxels.len() {
        return Err(Error::DimensionMismatch {
            context: "dynamic_assign predictions",
            expected: voxels.len(),
            got: preds.len(),
        });
    }
    let n_rows = voxels.len();
    if gts.is_empty() {
        return Ok(AssignmentResult {
            per_gt: Vec::new(),
            positives: Vec::new(),
            cls_target: Matrix::zeros(n_rows, num_classes),
        });
    }
    for gt in gts {
        gt.validate()?;
        if gt.class_id >= num_classes {
            return Err(Error::Invalid(alloc::format!(
                "class id {} out of range (num_classes = {num_classes})",
                gt.class_id
            )));
        }
    }

    // Phase 1: per-box candidates, costs, IoUs, adaptive k, cost ranking.
    let mut per_gt: Vec<GtAssignment> = Vec::with_capacity(gts.len());
    for gt in gts {
        let candidate_rows = nearest_candidates(voxels, gt, cfg.n)?;
        let selection_costs: Vec<f64> = candidate_rows
            .iter()
            .map(|&row| selection_cost(&preds[row], gt, cfg.lambda))
            .collect();
        let candidate_ious: Vec<f64> = candidate_rows
            .iter()
            .map(|&row| rotated_iou_bev(&preds[row].to_label(), gt))
            .collect();
        let k = adaptive_k(&candidate_ious);
        per_gt.push(GtAssignment {
            candidate_rows,
            selection_costs,
            candidate_ious,
            k,
            positive_rows: Vec::new(),
        });
    }

    // Phase 2: global greedy over (cost, gt, row) in ascending order. The
    // lowest-cost claimant wins a contested row; losers continue down their
    // own ranking, which is exactly the declared fallback rule.
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (g, a) in per_gt.iter().enumerate() {
        for (c, &row) in a.candidate_rows.iter().enumerate() {
            pairs.push((a.selection_costs[c], g, row));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken = vec![false; n_rows];
    let mut owner: Vec<Option<usize>> = vec![None; n_rows];
    let mut remaining: Vec<usize> = per_gt.iter().map(|a| a.k).collect();
    for (_, g, row) in pairs {
        if remaining[g] == 0 || taken[row] {
            continue;
        }
        taken[row] = true;
        owner[row] = Some(g);
        remaining[g] -= 1;
        per_gt[g].positive_rows.push(row);
    }
    for a in &mut per_gt {
        a.positive_rows.sort_unstable();
    }

    // Targets: 1 at positives for the box's class, IoU at other candidates
    // (capped below 1), 0 elsewhere; overlaps resolve by max.
    let mut cls_target = Matrix::zeros(n_rows, num_classes);
    for (g, a) in per_gt.iter().enumerate() {
        let class = gts[g].class_id;
        for (c, &row) in a.candidate_rows.iter().enumerate() {
            let value = if owner[row] == Some(g) {
                1.0
            } else {
                a.candidate_ious[c].min(SOFT_TARGET_MAX)
            };
            if value > cls_target.at(row, class) {
                cls_target.set(row, class, value);
            }
        }
    }

    let mut positives: Vec<(usize, usize)> = owner
        .iter()
        .enumerate()
        .filter_map(|(row, o)| o.map(|g| (row, g)))
        .collect();
    positives.sort_unstable();

    Ok(AssignmentResult {
        per_gt,
        positives,
        cls_target,
    })
}

/// Center-nearest baseline: each box claims its single nearest voxel. This is
/// exactly `dynamic_assign` with `n = 1`.
pub fn center_nearest_assign(
    voxels: &SparseTensor,
    preds: &[BoxPrediction],
    gts: &[BoxLabel],
    lambda: f64,
    num_classes: usize,
) -> Result<AssignmentResult> {
    dynamic_assign(
        voxels,
        preds,
        gts,
        &AssignConfig { n: 1, lambda },
        num_classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{Coord, GridSpec};

    fn voxels(coords: &[(u32, u32)]) -> SparseTensor {
        let grid = GridSpec::new((0.0, 0.0), (1.0, 1.0), (32, 32), 1).unwrap();
        let feat = Matrix::zeros(coords.len(), 1);
        SparseTensor::new(
            grid,
            coords.iter().map(|&(x, y)| Coord::new(x, y)).collect(),
            feat,
        )
        .unwrap()
    }

    fn gt(cx: f64, cy: f64, class_id: usize) -> BoxLabel {
        BoxLabel::new(cx, cy, 0.75, 3.0, 2.0, 1.5, 0.0, class_id).unwrap()
    }

    fn pred_at(voxels: &SparseTensor, row: usize, scores: Vec<f64>) -> BoxPrediction {
        let (cx, cy) = voxels.row_center(row);
        BoxPrediction {
            cx,
            cy,
            cz: 0.75,
            l: 3.0,
            w: 2.0,
            h: 1.5,
            yaw: 0.0,
            scores,
        }
    }

    fn preds_for(vox: &SparseTensor, scores: Vec<f64>) -> Vec<BoxPrediction> {
        (0..vox.len()).map(|r| pred_at(vox, r, scores.clone())).collect()
    }

    #[test]
    fn adaptive_k_follows_floor_and_clamps() {
        assert_eq!(adaptive_k(&[0.9, 0.9, 0.9]), 2); // sum 2.7
        assert_eq!(adaptive_k(&[0.1, 0.1, 0.1]), 1); // sum 0.3
        assert_eq!(adaptive_k(&[1.0; 5]), 5); // sum 5.0, n = 5
        assert_eq!(adaptive_k(&[1.0, 1.0]), 2); // clamp to n
    }

    #[test]
    fn nearest_candidates_orders_by_distance_then_row() {
        let vox = voxels(&[(1, 1), (2, 1), (10, 10), (1, 3)]);
        let g = gt(1.5, 1.5, 0);
        let rows = nearest_candidates(&vox, &g, 3).unwrap();
        // Distances from (1.5, 1.5): row0 (1.5,1.5) -> 0, row1 (2.5,1.5) -> 1,
        // row2 (1.5,3.5) -> 2, row3 (10.5,10.5) far.
        assert_eq!(rows, vec![0, 1, 2]);
    }

    #[test]
    fn nearest_candidates_truncates_to_population() {
        let vox = voxels(&[(1, 1), (2, 2)]);
        let rows = nearest_candidates(&vox, &gt(0.0, 0.0, 0), 5).unwrap();
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn nearest_candidates_rejects_empty() {
        let grid = GridSpec::new((0.0, 0.0), (1.0, 1.0), (8, 8), 1).unwrap();
        let vox = SparseTensor::empty(grid, 1);
        assert!(nearest_candidates(&vox, &gt(0.0, 0.0, 0), 1).is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_cost() {
        let vox = voxels(&[(1, 1)]);
        let g = gt(1.5, 1.5, 0);
        let p = pred_at(&vox, 0, vec![1.0]);
        assert!(selection_cost(&p, &g, 2.0).abs() < 1e-9);
    }

    #[test]
    fn lambda_zero_is_pure_classification_cost() {
        let vox = voxels(&[(4, 4)]);
        let g = gt(1.5, 1.5, 0);
        let p = pred_at(&vox, 0, vec![0.3]);
        let c = selection_cost(&p, &g, 0.0);
        assert!((c - focal_element(0.3, 1.0)).abs() < 1e-12);
    }

    #[test]
    fn single_voxel_single_gt_is_positive_with_unit_target() {
        let vox = voxels(&[(1, 1)]);
        let preds = preds_for(&vox, vec![0.5, 0.5]);
        let g = vec![gt(1.5, 1.5, 1)];
        let a = dynamic_assign(&vox, &preds, &g, &AssignConfig { n: 1, lambda: 2.0 }, 2).unwrap();
        assert_eq!(a.positives, vec![(0, 0)]);
        assert_eq!(a.cls_target.at(0, 1), 1.0);
        assert_eq!(a.cls_target.at(0, 0), 0.0);
    }

    #[test]
    fn perfect_candidates_all_become_positive() {
        // Five voxels ringed around the center, all with perfect predictions
        // of the box: every IoU is 1, so k = 5 and all are positives.
        let vox = voxels(&[(1, 1), (2, 1), (1, 2), (2, 2), (3, 1)]);
        let g = gt(2.0, 1.5, 0);
        let preds: Vec<BoxPrediction> = (0..vox.len())
            .map(|_| BoxPrediction {
                cx: g.cx,
                cy: g.cy,
                cz: g.cz,
                l: g.l,
                w: g.w,
                h: g.h,
                yaw: g.yaw,
                scores: vec![1.0],
            })
            .collect();
        let a = dynamic_assign(&vox, &preds, &[g], &AssignConfig::default(), 1).unwrap();
        assert_eq!(a.per_gt[0].k, 5);
        assert_eq!(a.positives.len(), 5);
    }

    #[test]
    fn empty_gts_yield_zero_targets() {
        let vox = voxels(&[(1, 1), (5, 5)]);
        let preds = preds_for(&vox, vec![0.5]);
        let a = dynamic_assign(&vox, &preds, &[], &AssignConfig::default(), 1).unwrap();
        assert!(a.positives.is_empty());
        assert!(a.cls_target.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contested_voxel_goes_to_lower_cost_box_with_fallback() {
        // Two boxes share the nearest voxel (row 1). The second box's
        // prediction there scores higher for its class, so it wins; the first
        // box falls back to its next candidate.
        let vox = voxels(&[(0, 1), (1, 1), (2, 1)]);
        let g0 = gt(1.4, 1.5, 0);
        let g1 = gt(1.6, 1.5, 1);
        let mut preds = vec![
            pred_at(&vox, 0, vec![0.4, 0.1]),
            pred_at(&vox, 1, vec![0.4, 0.9]),
            pred_at(&vox, 2, vec![0.4, 0.1]),
        ];
        // Make geometry identical so only scores differentiate costs.
        for p in &mut preds {
            p.cx = 1.5;
            p.cy = 1.5;
        }
        let a = dynamic_assign(&vox, &preds, &[g0, g1], &AssignConfig { n: 2, lambda: 2.0 }, 2)
            .unwrap();
        assert_eq!(a.per_gt[1].positive_rows, vec![1], "box 1 wins the contested row");
        assert!(!a.per_gt[0].positive_rows.contains(&1));
        assert_eq!(a.per_gt[0].positive_rows.len(), 1, "box 0 falls back");
    }

    #[test]
    fn n_equals_one_matches_center_nearest() {
        let vox = voxels(&[(0, 0), (3, 2), (7, 9), (12, 4)]);
        let preds = preds_for(&vox, vec![0.5, 0.5]);
        let gts = vec![gt(3.2, 2.4, 0), gt(12.4, 4.6, 1)];
        let a = dynamic_assign(&vox, &preds, &gts, &AssignConfig { n: 1, lambda: 2.0 }, 2).unwrap();
        let b = center_nearest_assign(&vox, &preds, &gts, 2.0, 2).unwrap();
        assert_eq!(a.positives, b.positives);
        assert_eq!(a.cls_target, b.cls_target);
    }

    #[test]
    fn target_partition_is_consistent() {
        let vox = voxels(&[(0, 1), (1, 1), (2, 1), (8, 8)]);
        let preds = preds_for(&vox, vec![0.6]);
        let gts = vec![gt(1.5, 1.5, 0)];
        let a = dynamic_assign(&vox, &preds, &gts, &AssignConfig { n: 3, lambda: 2.0 }, 1).unwrap();
        for row in 0..vox.len() {
            let t = a.cls_target.at(row, 0);
            let is_positive = a.positives.iter().any(|&(r, _)| r == row);
            let is_candidate = a.per_gt[0].candidate_rows.contains(&row);
            if is_positive {
                assert_eq!(t, 1.0);
            } else if is_candidate {
                assert!((0.0..1.0).contains(&t));
            } else {
                assert_eq!(t, 0.0);
            }
        }
    }
}
