//! Independent reference implementations used to verify the fast paths.
//!
//! Each oracle recomputes its result by the most direct route available
//! (dense arrays, explicit quadratic attention, exhaustive sorts, Monte
//! Carlo), sharing nothing with the implementation it checks except plain
//! data types. The one deliberate exception: the assignment oracle calls the
//! same scalar cost and IoU functions as the assigner, because positive sets
//! must match bit-for-bit and those scalars carry their own independent
//! tests.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assign::{adaptive_k, selection_cost, AssignConfig, AssignmentResult, GtAssignment};
use crate::boxes::{bev_corners, rotated_iou_bev, BoxLabel, BoxPrediction};
use crate::error::Result;
use crate::math;
use crate::par;
use crate::slot::{AttentionParams, Partition};
use crate::sparse::{ConvKernel, ConvMode, Coord, GridSpec, Point, SparseTensor};
use crate::tensor::Matrix;

/// Dense zero-padded convolution over the densified grid, tracking occupancy
/// so the result can be re-sparsified exactly: a cell survives when at least
/// one occupied input cell sits in its receptive field.
pub fn dense_conv_oracle(input: &SparseTensor, kernel: &ConvKernel) -> Result<SparseTensor> {
    let (w, h) = (
        input.grid().extent.0 as usize,
        input.grid().extent.1 as usize,
    );
    let c_in = input.channels();
    let c_out = kernel.c_out();
    let k = kernel.size();
    let r = (k / 2) as i64;
    let stride = kernel.stride() as i64;

    // Densify by direct scatter.
    let mut dense = vec![0.0f64; w * h * c_in];
    let mut occ = vec![false; w * h];
    for (row, &co) in input.coords().iter().enumerate() {
        occ[co.iy as usize * w + co.ix as usize] = true;
        for ch in 0..c_in {
            dense[(co.iy as usize * w + co.ix as usize) * c_in + ch] =
                input.features().at(row, ch);
        }
    }

    let out_grid = match (kernel.mode(), kernel.stride()) {
        (ConvMode::Submanifold, _) => input.grid().clone(),
        (ConvMode::Regular, 1) => input.grid().clone(),
        (ConvMode::Regular, _) => input.grid().downsampled(),
    };
    let (ow, oh) = (out_grid.extent.0 as usize, out_grid.extent.1 as usize);

    let mut coords = Vec::new();
    let mut features: Vec<f64> = Vec::new();
    for oy in 0..oh {
        for ox in 0..ow {
            // Receptive-field occupancy decides output occupancy.
            let mut reachable = false;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = ox as i64 * stride + dx;
                    let sy = oy as i64 * stride + dy;
                    if sx >= 0
                        && sy >= 0
                        && (sx as usize) < w
                        && (sy as usize) < h
                        && occ[sy as usize * w + sx as usize]
                    {
                        reachable = true;
                    }
                }
            }
            let keep = match kernel.mode() {
                ConvMode::Submanifold => occ
                    .get(oy * w + ox)
                    .copied()
                    .unwrap_or(false),
                ConvMode::Regular => reachable,
            };
            if !keep {
                continue;
            }
            let mut out_row = vec![0.0f64; c_out];
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = ox as i64 * stride + dx;
                    let sy = oy as i64 * stride + dy;
                    if sx < 0 || sy < 0 || sx as usize >= w || sy as usize >= h {
                        continue;
                    }
                    let base = (sy as usize * w + sx as usize) * c_in;
                    for ci in 0..c_in {
                        let v = dense[base + ci];
                        if v == 0.0 {
                            continue;
                        }
                        for (co, slot) in out_row.iter_mut().enumerate() {
                            *slot += v * kernel.weight_at(dy, dx, ci, co);
                        }
                    }
                }
            }
            for (co, slot) in out_row.iter_mut().enumerate() {
                *slot += kernel.bias().at(0, co);
            }
            coords.push(Coord::new(ox as u32, oy as u32));
            features.extend_from_slice(&out_row);
        }
    }
    let n = coords.len();
    SparseTensor::new(out_grid, coords, Matrix::from_vec(n, c_out, features))
}

/// Explicit quadratic kernelized attention within each group:
/// `v'_i = sum_j (q_i . k_j) v_j / (sum_j (q_i . k_j) + eps)`.
pub fn attention_oracle(
    input: &SparseTensor,
    partition: &Partition,
    params: &AttentionParams,
    eps: f64,
) -> Matrix {
    let relu = |m: Matrix| m.map(|v| if v > 0.0 { v } else { 0.0 });
    let q = relu(input.features().matmul(&params.w_q));
    let k = relu(input.features().matmul(&params.w_k));
    let v = input.features().matmul(&params.w_v);
    let c = v.cols();
    let n = input.len();
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        let mut numer = vec![0.0f64; c];
        let mut denom = 0.0f64;
        for j in 0..n {
            if partition.group[j] != partition.group[i] {
                continue;
            }
            let mut sim = 0.0;
            for ch in 0..c {
                sim += q.at(i, ch) * k.at(j, ch);
            }
            for ch in 0..c {
                numer[ch] += sim * v.at(j, ch);
            }
            denom += sim;
        }
        for ch in 0..c {
            out.set(i, ch, numer[ch] / (denom + eps));
        }
    }
    out
}

/// Exhaustive-sort assignment oracle implementing the same declared policy as
/// the assigner: full distance sort per box, adaptive k from candidate IoUs,
/// then a global greedy over all (cost, box, row) pairs ascending.
pub fn assignment_oracle(
    voxels: &SparseTensor,
    preds: &[BoxPrediction],
    gts: &[BoxLabel],
    cfg: &AssignConfig,
    num_classes: usize,
) -> AssignmentResult {
    let n_rows = voxels.len();
    if gts.is_empty() {
        return AssignmentResult {
            per_gt: Vec::new(),
            positives: Vec::new(),
            cls_target: Matrix::zeros(n_rows, num_classes),
        };
    }
    let mut per_gt: Vec<GtAssignment> = Vec::new();
    for gt in gts {
        // Full sort of every row by distance, no partial selection.
        let mut all: Vec<(f64, usize)> = (0..n_rows)
            .map(|row| {
                let (cx, cy) = voxels.row_center(row);
                let d2 = (cx - gt.cx) * (cx - gt.cx) + (cy - gt.cy) * (cy - gt.cy);
                (math::sqrt(d2), row)
            })
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let candidate_rows: Vec<usize> = all.iter().take(cfg.n).map(|&(_, r)| r).collect();
        let selection_costs: Vec<f64> = candidate_rows
            .iter()
            .map(|&r| selection_cost(&preds[r], gt, cfg.lambda))
            .collect();
        let candidate_ious: Vec<f64> = candidate_rows
            .iter()
            .map(|&r| rotated_iou_bev(&preds[r].to_label(), gt))
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

    // Exhaustive pair list, sorted once, consumed greedily.
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (g, a) in per_gt.iter().enumerate() {
        for (ci, &row) in a.candidate_rows.iter().enumerate() {
            pairs.push((a.selection_costs[ci], g, row));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut owner: Vec<Option<usize>> = vec![None; n_rows];
    let mut budget: Vec<usize> = per_gt.iter().map(|a| a.k).collect();
    for (_, g, row) in pairs {
        if budget[g] > 0 && owner[row].is_none() {
            owner[row] = Some(g);
            budget[g] -= 1;
            per_gt[g].positive_rows.push(row);
        }
    }
    for a in &mut per_gt {
        a.positive_rows.sort_unstable();
    }

    let mut cls_target = Matrix::zeros(n_rows, num_classes);
    for (g, a) in per_gt.iter().enumerate() {
        let class = gts[g].class_id;
        for (ci, &row) in a.candidate_rows.iter().enumerate() {
            let value = if owner[row] == Some(g) {
                1.0
            } else {
                a.candidate_ious[ci].min(1.0 - 1e-9)
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
    AssignmentResult {
        per_gt,
        positives,
        cls_target,
    }
}

/// Monte-Carlo BEV IoU estimate: uniform samples over the joint bounding box,
/// IoU as the ratio of both-hit to either-hit counts.
pub fn mc_iou_bev(a: &BoxLabel, b: &BoxLabel, samples: usize, seed: u64) -> f64 {
    let ca = bev_corners(a.cx, a.cy, a.l, a.w, a.yaw);
    let cb = bev_corners(b.cx, b.cy, b.l, b.w, b.yaw);
    let xs = ca.iter().chain(cb.iter()).map(|p| p.0);
    let ys = ca.iter().chain(cb.iter()).map(|p| p.1);
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in xs {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
    }
    for y in ys {
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let inside = |bx: &BoxLabel, x: f64, y: f64| -> bool {
        let (s, c) = (math::sin(bx.yaw), math::cos(bx.yaw));
        let dx = x - bx.cx;
        let dy = y - bx.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        math::abs(u) <= bx.l * 0.5 && math::abs(v) <= bx.w * 0.5
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut both = 0u64;
    let mut either = 0u64;
    for _ in 0..samples {
        let x = rng.gen_range(x_lo..x_hi);
        let y = rng.gen_range(y_lo..y_hi);
        let ia = inside(a, x, y);
        let ib = inside(b, x, y);
        if ia && ib {
            both += 1;
        }
        if ia || ib {
            either += 1;
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// Quadratic keep-list NMS: a prediction survives iff no higher-ranked
/// surviving prediction overlaps it at or above the threshold.
pub fn nms_oracle(
    preds: &[BoxPrediction],
    iou_thresh: f64,
    score_thresh: f64,
) -> Vec<BoxPrediction> {
    let mut pool: Vec<&BoxPrediction> = preds
        .iter()
        .filter(|p| p.best_class().1 >= score_thresh)
        .collect();
    pool.sort_by(|a, b| {
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
    });
    let mut alive = vec![true; pool.len()];
    for i in 0..pool.len() {
        if !alive[i] {
            continue;
        }
        for j in (i + 1)..pool.len() {
            if alive[j]
                && rotated_iou_bev(&pool[i].to_label(), &pool[j].to_label()) >= iou_thresh
            {
                alive[j] = false;
            }
        }
    }
    pool.into_iter()
        .zip(alive)
        .filter_map(|(p, a)| if a { Some(p.clone()) } else { None })
        .collect()
}

/// Brute-force voxelization: bucket points by cell, average raw features.
pub fn voxelize_oracle(points: &[Point], grid: &GridSpec) -> BTreeMap<Coord, [f64; 4]> {
    let mut buckets: BTreeMap<Coord, Vec<&Point>> = BTreeMap::new();
    for p in points {
        if let Some(c) = grid.cell_of(p.x, p.y) {
            buckets.entry(c).or_default().push(p);
        }
    }
    buckets
        .into_iter()
        .map(|(c, pts)| {
            let center = grid.cell_center(c);
            let n = pts.len() as f64;
            let mut mean = [0.0f64; 4];
            for p in &pts {
                mean[0] += (p.x - center.0) / n;
                mean[1] += (p.y - center.1) / n;
                mean[2] += p.z / n;
                mean[3] += p.intensity / n;
            }
            (c, mean)
        })
        .collect()
}

/// Dense oracle for scatter-then-diffuse upsampling: place each coarse
/// feature at the doubled coordinate of a dense fine grid, run the dense
/// regular convolution there.
pub fn upsample_sp_oracle(input: &SparseTensor, kernel: &ConvKernel) -> Result<SparseTensor> {
    let fine = input.grid().upsampled()?;
    let coords: Vec<Coord> = input
        .coords()
        .iter()
        .map(|c| Coord::new(c.ix * 2, c.iy * 2))
        .collect();
    let scattered = SparseTensor::new(fine, coords, input.features().clone())?;
    dense_conv_oracle(&scattered, kernel)
}

/// Dense oracle for repeat-then-mix upsampling: nearest-neighbor upsample of
/// the densified coarse grid, dense conv, masked to the repeated occupancy.
pub fn upsample_sm_oracle(input: &SparseTensor, kernel: &ConvKernel) -> Result<SparseTensor> {
    let fine = input.grid().upsampled()?;
    let mut coords = Vec::with_capacity(input.len() * 4);
    let c = input.channels();
    let mut feat = Matrix::zeros(input.len() * 4, c);
    for (row, &co) in input.coords().iter().enumerate() {
        for (i, (dx, dy)) in [(0u32, 0u32), (1, 0), (0, 1), (1, 1)].iter().enumerate() {
            coords.push(Coord::new(co.ix * 2 + dx, co.iy * 2 + dy));
            feat.row_mut(row * 4 + i).copy_from_slice(input.features().row(row));
        }
    }
    let repeated = SparseTensor::new(fine, coords, feat)?;
    dense_conv_oracle(&repeated, kernel)
}

/// Uniformly random sparse tensor for randomized oracle comparisons.
pub fn random_sparse_tensor(
    rng: &mut ChaCha8Rng,
    grid: &GridSpec,
    density: f64,
    channels: usize,
) -> SparseTensor {
    let mut coords = Vec::new();
    for iy in 0..grid.extent.1 {
        for ix in 0..grid.extent.0 {
            if rng.gen_range(0.0..1.0) < density {
                coords.push(Coord::new(ix, iy));
            }
        }
    }
    if coords.is_empty() {
        coords.push(Coord::new(
            rng.gen_range(0..grid.extent.0),
            rng.gen_range(0..grid.extent.1),
        ));
    }
    let n = coords.len();
    let feat = Matrix::from_fn(n, channels, |_, _| rng.gen_range(-2.0..2.0));
    SparseTensor::new(grid.clone(), coords, feat).expect("random tensor construction")
}

/// Random kernel for randomized oracle comparisons.
pub fn random_kernel(
    rng: &mut ChaCha8Rng,
    size: usize,
    c_in: usize,
    c_out: usize,
    mode: ConvMode,
    stride: u32,
) -> ConvKernel {
    let weights = Matrix::from_fn(size * size * c_in, c_out, |_, _| rng.gen_range(-1.0..1.0));
    let bias = Matrix::from_fn(1, c_out, |_, _| rng.gen_range(-0.5..0.5));
    ConvKernel::new(size, c_in, c_out, weights, bias, mode, stride).expect("random kernel")
}

/// Max relative feature error between two sparse tensors that must share
/// coordinates; a coordinate-set mismatch returns infinity.
pub fn sparse_rel_err(a: &SparseTensor, b: &SparseTensor) -> f64 {
    if a.coords() != b.coords() {
        return f64::INFINITY;
    }
    a.features().max_rel_diff(b.features(), 1.0)
}

/// Convenience wrapper running many randomized conv-oracle comparisons;
/// returns the max relative error over all cases.
pub fn conv_oracle_sweep(cases: usize, seed: u64) -> f64 {
    let errs = par::map_indexed(cases, 1, |case| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (case as u64).wrapping_mul(0x9E37_79B9));
        let w = rng.gen_range(4..=16u32);
        let h = rng.gen_range(4..=16u32);
        let grid = GridSpec::new(
            (0.0, 0.0),
            (0.5, 0.5),
            (w, h),
            if case % 2 == 0 { 2 } else { 4 },
        )
        .expect("grid");
        let c_in = rng.gen_range(1..=6);
        let c_out = rng.gen_range(1..=6);
        let density = rng.gen_range(0.1..0.6);
        let input = random_sparse_tensor(&mut rng, &grid, density, c_in);
        let mut worst = 0.0f64;
        // Submanifold k3.
        let k = random_kernel(&mut rng, 3, c_in, c_out, ConvMode::Submanifold, 1);
        let fast = crate::sparse::submanifold_conv(&input, &k).expect("subm conv");
        let slow = dense_conv_oracle(&input, &k).expect("subm oracle");
        worst = worst.max(sparse_rel_err(&fast, &slow));
        // Regular k3 stride 1 and stride 2.
        for stride in [1u32, 2] {
            let k = random_kernel(&mut rng, 3, c_in, c_out, ConvMode::Regular, stride);
            let fast = crate::sparse::sparse_conv(&input, &k).expect("sparse conv");
            let slow = dense_conv_oracle(&input, &k).expect("conv oracle");
            worst = worst.max(sparse_rel_err(&fast, &slow));
        }
        // Both upsampling strategies (input grids above are at stride >= 2).
        let k = random_kernel(&mut rng, 3, c_in, c_out, ConvMode::Regular, 1);
        let fast = crate::upsample::upsample_sp(&input, &k).expect("sp up");
        let slow = upsample_sp_oracle(&input, &k).expect("sp oracle");
        worst = worst.max(sparse_rel_err(&fast, &slow));
        let k = random_kernel(&mut rng, 3, c_in, c_out, ConvMode::Submanifold, 1);
        let fast = crate::upsample::upsample_sm(&input, &k).expect("sm up");
        let slow = upsample_sm_oracle(&input, &k).expect("sm oracle");
        worst = worst.max(sparse_rel_err(&fast, &slow));
        worst
    });
    errs.into_iter().fold(0.0, f64::max)
}
