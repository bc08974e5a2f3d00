//! Training step: traced loss assembly, backward, Adam update.
//!
//! Label assignment runs on detached predictions; its candidate rows, picked
//! positives, and soft targets enter the loss graph as constants, so no
//! gradient is attributed through the selection. The regression loss rebuilds
//! the rotation-weighted IoU from tape primitives so it stays differentiable
//! end to end.

use alloc::vec::Vec;

use crate::assign::{dynamic_assign, AssignConfig, AssignmentResult};
use crate::boxes::BoxLabel;
use crate::error::{Error, Result};
use crate::math;
use crate::model::{decode_rows, ForwardOutput, SlotDetector};
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::scene::SceneSpec;
use crate::sparse::Point;
use crate::tape::{NodeId, Tape};
use crate::tensor::Matrix;

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<Point>,
    pub boxes: Vec<BoxLabel>,
}

impl Scene {
    pub fn generate(spec: &SceneSpec) -> Result<Scene> {
        let (points, boxes) = crate::scene::generate_scene(spec)?;
        Ok(Scene { points, boxes })
    }
}

/// Loss nodes of one scene's graph.
pub struct LossNodes {
    pub cls: NodeId,
    pub reg: NodeId,
    pub total: NodeId,
}

/// Scalar losses reported per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

/// Builds the classification + regression loss graph given a frozen
/// assignment. `total = cls + lambda * reg`.
pub fn build_loss(
    tape: &mut Tape,
    fwd: &ForwardOutput,
    assignment: &AssignmentResult,
    gts: &[BoxLabel],
    lambda: f64,
) -> LossNodes {
    // Classification: quality focal over all rows, built on logits for
    // numerical stability (ln sigma(z) = -softplus(-z)).
    let targets = tape.leaf(assignment.cls_target.clone());
    let positives = assignment
        .cls_target
        .data()
        .iter()
        .filter(|&&t| t == 1.0)
        .count();
    let shape = assignment.cls_target.shape();
    let ones = tape.leaf(Matrix::filled(shape.0, shape.1, 1.0));
    let diff = tape.sub(targets, fwd.scores);
    let weight = tape.mul(diff, diff);
    let neg_logits = tape.scale(fwd.logits, -1.0);
    let sp_neg = tape.softplus(neg_logits);
    let sp_pos = tape.softplus(fwd.logits);
    let t_term = tape.mul(targets, sp_neg);
    let one_minus_t = tape.sub(ones, targets);
    let nt_term = tape.mul(one_minus_t, sp_pos);
    let ce = tape.add(t_term, nt_term);
    let elems = tape.mul(weight, ce);
    let cls_sum = tape.sum_all(elems);
    let cls = tape.scale(cls_sum, 1.0 / positives.max(1) as f64);

    // Regression: rotation-weighted IoU loss over positives, averaged.
    let reg = if assignment.positives.is_empty() {
        tape.leaf(Matrix::scalar(0.0))
    } else {
        build_reg_loss(tape, fwd, assignment, gts)
    };

    let weighted_reg = tape.scale(reg, lambda);
    let total = tape.add(cls, weighted_reg);
    LossNodes { cls, reg, total }
}

fn build_reg_loss(
    tape: &mut Tape,
    fwd: &ForwardOutput,
    assignment: &AssignmentResult,
    gts: &[BoxLabel],
) -> NodeId {
    let p = assignment.positives.len();
    let rows: Vec<usize> = assignment.positives.iter().map(|&(row, _)| row).collect();
    let col = |f: &dyn Fn(usize) -> f64| {
        Matrix::from_fn(p, 1, |i, _| f(i))
    };
    // Ground-truth-derived constants per positive row.
    let gt_of = |i: usize| &gts[assignment.positives[i].1];
    let vx = tape.leaf(col(&|i| fwd.head_grid.cell_center(fwd.head_coords[rows[i]]).0));
    let vy = tape.leaf(col(&|i| fwd.head_grid.cell_center(fwd.head_coords[rows[i]]).1));
    let cos_t = tape.leaf(col(&|i| math::cos(gt_of(i).yaw)));
    let sin_t = tape.leaf(col(&|i| math::sin(gt_of(i).yaw)));
    let gcx = tape.leaf(col(&|i| gt_of(i).cx));
    let gcy = tape.leaf(col(&|i| gt_of(i).cy));
    let gl_half = tape.leaf(col(&|i| gt_of(i).l * 0.5));
    let gw_half = tape.leaf(col(&|i| gt_of(i).w * 0.5));
    let neg_gl_half = tape.leaf(col(&|i| -gt_of(i).l * 0.5));
    let neg_gw_half = tape.leaf(col(&|i| -gt_of(i).w * 0.5));
    let gz_lo = tape.leaf(col(&|i| gt_of(i).cz - gt_of(i).h * 0.5));
    let gz_hi = tape.leaf(col(&|i| gt_of(i).cz + gt_of(i).h * 0.5));
    let gvol = tape.leaf(col(&|i| gt_of(i).l * gt_of(i).w * gt_of(i).h));
    let gyaw = tape.leaf(col(&|i| gt_of(i).yaw));
    let ones = tape.leaf(Matrix::filled(p, 1, 1.0));

    let enc = tape.gather_rows(fwd.encodings, rows);
    let dx = tape.slice_cols(enc, 0, 1);
    let dy = tape.slice_cols(enc, 1, 2);
    let cz = tape.slice_cols(enc, 2, 3);
    let log_l = tape.slice_cols(enc, 3, 4);
    let log_w = tape.slice_cols(enc, 4, 5);
    let log_h = tape.slice_cols(enc, 5, 6);
    let sin_q = tape.slice_cols(enc, 6, 7);
    let cos_q = tape.slice_cols(enc, 7, 8);

    let cx = tape.add(vx, dx);
    let cy = tape.add(vy, dy);
    let l = tape.exp(log_l);
    let w = tape.exp(log_w);
    let h = tape.exp(log_h);

    // Prediction center in the ground truth's yaw-aligned frame.
    let ddx = tape.sub(cx, gcx);
    let ddy = tape.sub(cy, gcy);
    let cx_rot_a = tape.mul(cos_t, ddx);
    let cx_rot_b = tape.mul(sin_t, ddy);
    let px = tape.add(cx_rot_a, cx_rot_b);
    let cy_rot_a = tape.mul(cos_t, ddy);
    let cy_rot_b = tape.mul(sin_t, ddx);
    let py = tape.sub(cy_rot_a, cy_rot_b);

    // Axis-aligned overlaps in that frame (prediction treated axis-aligned).
    let l_half = tape.scale(l, 0.5);
    let w_half = tape.scale(w, 0.5);
    let h_half = tape.scale(h, 0.5);
    let x_hi_p = tape.add(px, l_half);
    let x_lo_p = tape.sub(px, l_half);
    let x_hi = tape.emin(x_hi_p, gl_half);
    let x_lo = tape.emax(x_lo_p, neg_gl_half);
    let ox_raw = tape.sub(x_hi, x_lo);
    let ox = tape.relu(ox_raw);
    let y_hi_p = tape.add(py, w_half);
    let y_lo_p = tape.sub(py, w_half);
    let y_hi = tape.emin(y_hi_p, gw_half);
    let y_lo = tape.emax(y_lo_p, neg_gw_half);
    let oy_raw = tape.sub(y_hi, y_lo);
    let oy = tape.relu(oy_raw);
    let z_hi_p = tape.add(cz, h_half);
    let z_lo_p = tape.sub(cz, h_half);
    let z_hi = tape.emin(z_hi_p, gz_hi);
    let z_lo = tape.emax(z_lo_p, gz_lo);
    let oz_raw = tape.sub(z_hi, z_lo);
    let oz = tape.relu(oz_raw);

    let oxy = tape.mul(ox, oy);
    let inter = tape.mul(oxy, oz);
    let vol_lw = tape.mul(l, w);
    let vol_p = tape.mul(vol_lw, h);
    let vols = tape.add(vol_p, gvol);
    let union = tape.sub(vols, inter);
    let iou = tape.div(inter, union);

    let yaw_p = tape.atan2(sin_q, cos_q);
    let dyaw = tape.sub(yaw_p, gyaw);
    let two_dyaw = tape.scale(dyaw, 2.0);
    let cos2 = tape.cos(two_dyaw);
    let cos2_p1 = tape.add_scalar(cos2, 1.0);
    let rho = tape.scale(cos2_p1, 0.5);

    let rwiou = tape.mul(iou, rho);
    let per_row = tape.sub(ones, rwiou);
    let total = tape.sum_all(per_row);
    tape.scale(total, 1.0 / p as f64)
}

/// Forward + assignment for one scene; the assignment is detached.
pub fn assign_scene(
    model: &SlotDetector,
    tape: &mut Tape,
    scene: &Scene,
    assign_cfg: &AssignConfig,
) -> Result<(ForwardOutput, AssignmentResult)> {
    let fwd = model.forward(tape, &scene.points)?;
    let scores = tape.value(fwd.scores).clone();
    let encodings = tape.value(fwd.encodings).clone();
    let preds = decode_rows(&scores, &encodings, &fwd.head_grid, &fwd.head_coords)?;
    let voxel_view = crate::sparse::SparseTensor::new(
        fwd.head_grid.clone(),
        fwd.head_coords.clone(),
        Matrix::zeros(fwd.head_coords.len(), 0),
    )?;
    let assignment = dynamic_assign(
        &voxel_view,
        &preds,
        &scene.boxes,
        assign_cfg,
        model.cfg.num_classes,
    )?;
    Ok((fwd, assignment))
}

/// Scalar loss of one scene, optionally under a frozen assignment (used by
/// gradient checks). Also reports the tape's kink margin.
pub fn loss_eval(
    model: &SlotDetector,
    scene: &Scene,
    assign_cfg: &AssignConfig,
    frozen: Option<&AssignmentResult>,
) -> Result<(StepLosses, f64)> {
    let mut tape = Tape::new();
    let (fwd, assignment) = match frozen {
        Some(a) => {
            let fwd = model.forward(&mut tape, &scene.points)?;
            (fwd, a.clone())
        }
        None => assign_scene(model, &mut tape, scene, assign_cfg)?,
    };
    let nodes = build_loss(&mut tape, &fwd, &assignment, &scene.boxes, assign_cfg.lambda);
    Ok((
        StepLosses {
            cls: tape.value(nodes.cls).at(0, 0),
            reg: tape.value(nodes.reg).at(0, 0),
            total: tape.value(nodes.total).at(0, 0),
        },
        tape.min_kink_margin(),
    ))
}

/// Gradients of the batch-mean loss for every parameter slot.
pub fn batch_gradients(
    model: &SlotDetector,
    scenes: &[Scene],
    assign_cfg: &AssignConfig,
) -> Result<(Vec<Matrix>, StepLosses)> {
    if scenes.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    for scene in scenes {
        if scene.boxes.is_empty() {
            return Err(Error::EmptyInput("training scene without ground-truth boxes"));
        }
    }
    let mut acc: Vec<Matrix> = model
        .params
        .tensors()
        .iter()
        .map(|m| Matrix::zeros(m.rows(), m.cols()))
        .collect();
    let mut mean = StepLosses {
        cls: 0.0,
        reg: 0.0,
        total: 0.0,
    };
    let scale = 1.0 / scenes.len() as f64;
    for scene in scenes {
        let mut tape = Tape::new();
        let (fwd, assignment) = assign_scene(model, &mut tape, scene, assign_cfg)?;
        let nodes = build_loss(&mut tape, &fwd, &assignment, &scene.boxes, assign_cfg.lambda);
        let grads = tape.backward(nodes.total)?;
        for (slot, id) in fwd.param_nodes.iter().enumerate() {
            let g = grads.get_or_zeros(*id, acc[slot].shape());
            acc[slot].add_scaled_assign(&g, scale);
        }
        mean.cls += tape.value(nodes.cls).at(0, 0) * scale;
        mean.reg += tape.value(nodes.reg).at(0, 0) * scale;
        mean.total += tape.value(nodes.total).at(0, 0) * scale;
    }
    Ok((acc, mean))
}

/// One optimization step over a batch of scenes: forward, assign (detached),
/// loss, backward, Adam.
pub fn train_step(
    model: &mut SlotDetector,
    scenes: &[Scene],
    assign_cfg: &AssignConfig,
    adam_cfg: &AdamConfig,
    opt: &mut OptimizerState,
) -> Result<StepLosses> {
    let (grads, losses) = batch_gradients(model, scenes, assign_cfg)?;
    let mut tensors: Vec<Matrix> = (0..model.params.len())
        .map(|slot| model.params.tensor(slot).clone())
        .collect();
    adam_step(&mut tensors, &grads, opt, adam_cfg)?;
    for (slot, t) in tensors.into_iter().enumerate() {
        *model.params.tensor_mut(slot) = t;
    }
    Ok(losses)
}
