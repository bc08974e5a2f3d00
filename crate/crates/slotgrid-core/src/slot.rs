//! Slot partitioning and per-slot linear attention.
//!
//! The grid is divided into stripes ("slots") that span the full extent along
//! one axis and `w` cells along the other. Attention inside each slot uses
//! the kernelized linear form: ReLU feature maps for queries and keys, a
//! per-slot `KᵀV` summary, and a normalization by `q · Σkᵀ`. Alternating the
//! slot axis between layers gives every voxel a global receptive field after
//! one X+Y pair.
//!
//! Window-based partitions (plain windows, and windows with fixed-size sets)
//! are provided as drop-in grouping alternatives for ablations.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::sparse::SparseTensor;
use crate::tape::{NodeId, Tape};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotAxis {
    X,
    Y,
}

/// Assignment of voxels to slots along one axis.
///
/// For `axis = X` the slot index of a voxel is `floor(iy / w)`; for
/// `axis = Y` it is `floor(ix / w)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotPartition {
    pub axis: SlotAxis,
    pub width: u32,
    pub slot_index: Vec<u32>,
    pub slot_count: u32,
}

/// Generic grouping of rows; what per-group attention actually consumes.
///
/// `group[i]` is a dense group id in `0..num_groups`, numbered by first
/// occurrence in canonical row order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub group: Vec<usize>,
    pub num_groups: usize,
}

impl Partition {
    /// Rows of each group, in ascending row order.
    pub fn rows_by_group(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_groups];
        for (row, &g) in self.group.iter().enumerate() {
            out[g].push(row);
        }
        out
    }

    fn from_labels<L: Ord + Clone>(labels: &[L]) -> Partition {
        let mut ids: BTreeMap<L, usize> = BTreeMap::new();
        let mut next = 0usize;
        let mut group = Vec::with_capacity(labels.len());
        for l in labels {
            let id = *ids.entry(l.clone()).or_insert_with(|| {
                let id = next;
                next += 1;
                id
            });
            group.push(id);
        }
        Partition {
            group,
            num_groups: next,
        }
    }
}

impl From<&SlotPartition> for Partition {
    fn from(sp: &SlotPartition) -> Partition {
        Partition {
            group: sp.slot_index.iter().map(|&s| s as usize).collect(),
            num_groups: sp.slot_count as usize,
        }
    }
}

/// Computes slot indices for every voxel.
pub fn slot_partition(input: &SparseTensor, axis: SlotAxis, w: u32) -> Result<SlotPartition> {
    if w == 0 {
        return Err(Error::Invalid("slot width must be >= 1".into()));
    }
    let extent = input.grid().extent;
    let (partitioned_extent, slot_index): (u32, Vec<u32>) = match axis {
        SlotAxis::X => (
            extent.1,
            input.coords().iter().map(|c| c.iy / w).collect(),
        ),
        SlotAxis::Y => (
            extent.0,
            input.coords().iter().map(|c| c.ix / w).collect(),
        ),
    };
    let slot_count = partitioned_extent.div_ceil(w);
    Ok(SlotPartition {
        axis,
        width: w,
        slot_index,
        slot_count,
    })
}

/// Window partition: voxels sharing a `window x window` tile form one group.
pub fn window_partition(input: &SparseTensor, window: u32) -> Result<Partition> {
    if window == 0 {
        return Err(Error::Invalid("window size must be >= 1".into()));
    }
    let labels: Vec<(u32, u32)> = input
        .coords()
        .iter()
        .map(|c| (c.ix / window, c.iy / window))
        .collect();
    Ok(Partition::from_labels(&labels))
}

/// Window partition followed by chunking each window's voxels (in canonical
/// order) into sets of at most `set_size`.
pub fn window_set_partition(input: &SparseTensor, window: u32, set_size: usize) -> Result<Partition> {
    if window == 0 {
        return Err(Error::Invalid("window size must be >= 1".into()));
    }
    if set_size == 0 {
        return Err(Error::Invalid("set size must be >= 1".into()));
    }
    let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let labels: Vec<(u32, u32, usize)> = input
        .coords()
        .iter()
        .map(|c| {
            let win = (c.ix / window, c.iy / window);
            let seen = counts.entry(win).or_insert(0);
            let chunk = *seen / set_size;
            *seen += 1;
            (win.0, win.1, chunk)
        })
        .collect();
    Ok(Partition::from_labels(&labels))
}

/// Parameters of one attention layer: query/key/value projections, the output
/// projection, a two-layer feed-forward net, and two pre-norm affine pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_out: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
    pub norm1_gamma: Matrix,
    pub norm1_beta: Matrix,
    pub norm2_gamma: Matrix,
    pub norm2_beta: Matrix,
}

impl AttentionParams {
    pub fn channels(&self) -> usize {
        self.w_q.rows()
    }

    pub fn validate(&self, channels: usize, ffn_hidden: usize) -> Result<()> {
        let square = [&self.w_q, &self.w_k, &self.w_v, &self.w_out];
        for m in square {
            if m.shape() != (channels, channels) {
                return Err(Error::DimensionMismatch {
                    context: "attention projection",
                    expected: channels,
                    got: m.rows(),
                });
            }
        }
        if self.ffn_w1.shape() != (channels, ffn_hidden)
            || self.ffn_w2.shape() != (ffn_hidden, channels)
            || self.ffn_b1.shape() != (1, ffn_hidden)
            || self.ffn_b2.shape() != (1, channels)
        {
            return Err(Error::DimensionMismatch {
                context: "attention ffn",
                expected: ffn_hidden,
                got: self.ffn_w1.cols(),
            });
        }
        for m in [
            &self.norm1_gamma,
            &self.norm1_beta,
            &self.norm2_gamma,
            &self.norm2_beta,
        ] {
            if m.shape() != (1, channels) {
                return Err(Error::DimensionMismatch {
                    context: "attention norm",
                    expected: channels,
                    got: m.cols(),
                });
            }
        }
        let all = [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_out,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
        ];
        if all.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("attention parameters"));
        }
        Ok(())
    }

    /// Random initialization: uniform `±sqrt(1/fan_in)` weights, identity norms.
    pub fn init<R: Rng>(rng: &mut R, channels: usize, ffn_hidden: usize) -> Self {
        let mut mat = |rows: usize, cols: usize| {
            let bound = 1.0 / crate::math::sqrt(rows as f64);
            Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
        };
        AttentionParams {
            w_q: mat(channels, channels),
            w_k: mat(channels, channels),
            w_v: mat(channels, channels),
            w_out: mat(channels, channels),
            ffn_w1: mat(channels, ffn_hidden),
            ffn_b1: Matrix::zeros(1, ffn_hidden),
            ffn_w2: mat(ffn_hidden, channels),
            ffn_b2: Matrix::zeros(1, channels),
            norm1_gamma: Matrix::filled(1, channels, 1.0),
            norm1_beta: Matrix::zeros(1, channels),
            norm2_gamma: Matrix::filled(1, channels, 1.0),
            norm2_beta: Matrix::zeros(1, channels),
        }
    }
}

/// Stack configuration: slot width, FFN width, and the attention-denominator
/// stabilizer.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotStackConfig {
    pub num_layers: usize,
    pub width: u32,
    pub ffn_hidden: usize,
    pub eps: f64,
}

impl SlotStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers % 2 != 0 {
            return Err(Error::Invalid(alloc::format!(
                "slot stack layer count must be even so axes alternate in pairs, got {}",
                self.num_layers
            )));
        }
        if self.width == 0 {
            return Err(Error::Invalid("slot width must be >= 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Invalid("attention eps must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for SlotStackConfig {
    fn default() -> Self {
        SlotStackConfig {
            num_layers: 4,
            width: 12,
            ffn_hidden: 0, // resolved to 2*channels by callers that know C
            eps: 1e-6,
        }
    }
}

/// Tape node ids of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionNodeIds {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_out: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub norm1_gamma: NodeId,
    pub norm1_beta: NodeId,
    pub norm2_gamma: NodeId,
    pub norm2_beta: NodeId,
}

impl AttentionNodeIds {
    pub fn register(tape: &mut Tape, p: &AttentionParams) -> Self {
        AttentionNodeIds {
            w_q: tape.leaf(p.w_q.clone()),
            w_k: tape.leaf(p.w_k.clone()),
            w_v: tape.leaf(p.w_v.clone()),
            w_out: tape.leaf(p.w_out.clone()),
            ffn_w1: tape.leaf(p.ffn_w1.clone()),
            ffn_b1: tape.leaf(p.ffn_b1.clone()),
            ffn_w2: tape.leaf(p.ffn_w2.clone()),
            ffn_b2: tape.leaf(p.ffn_b2.clone()),
            norm1_gamma: tape.leaf(p.norm1_gamma.clone()),
            norm1_beta: tape.leaf(p.norm1_beta.clone()),
            norm2_gamma: tape.leaf(p.norm2_gamma.clone()),
            norm2_beta: tape.leaf(p.norm2_beta.clone()),
        }
    }
}

const LAYER_NORM_EPS: f64 = 1e-8;

/// Kernelized per-group attention values: for each row `i`,
/// `v'_i = (q_i · KV_g) / (q_i · Σkᵀ_g + eps)` with `q = relu(x W_q)`,
/// `k = relu(x W_k)`, `v = x W_v`, grouped by `partition`.
///
/// Per-group reductions run in canonical row order; groups are independent.
pub fn attention_values_node(
    tape: &mut Tape,
    x: NodeId,
    partition: &Partition,
    ids: &AttentionNodeIds,
    eps: f64,
) -> NodeId {
    let n = tape.value(x).rows();
    assert_eq!(partition.group.len(), n, "partition length mismatch");
    let q_all = tape.matmul(x, ids.w_q);
    let q_all = tape.relu(q_all);
    let k_all = tape.matmul(x, ids.w_k);
    let k_all = tape.relu(k_all);
    let v_all = tape.matmul(x, ids.w_v);
    let mut parts: Vec<(NodeId, Vec<usize>)> = Vec::new();
    for rows in partition.rows_by_group() {
        if rows.is_empty() {
            continue;
        }
        let q = tape.gather_rows(q_all, rows.clone());
        let k = tape.gather_rows(k_all, rows.clone());
        let v = tape.gather_rows(v_all, rows.clone());
        let kv = tape.matmul_tn(k, v);
        let numer = tape.matmul(q, kv);
        let ksum = tape.sum_rows(k);
        let ksum_t = tape.transpose(ksum);
        let denom_raw = tape.matmul(q, ksum_t);
        // Exactly-zero raw denominators mean the whole row is locally zero
        // (both ReLU feature maps dead there), which is smooth; only small
        // nonzero ones sit near a steep region worth resampling around.
        let mut margin = f64::INFINITY;
        for &d in tape.value(denom_raw).data() {
            if d != 0.0 {
                margin = margin.min(d);
            }
        }
        tape.note_kink_margin(margin);
        let denom = tape.add_scalar(denom_raw, eps);
        let values = tape.div_col_broadcast(numer, denom);
        parts.push((values, rows));
    }
    tape.scatter_rows(parts, n)
}

/// Full attention sub-block: values, output projection, residual add.
pub fn attention_node(
    tape: &mut Tape,
    x: NodeId,
    partition: &Partition,
    ids: &AttentionNodeIds,
    eps: f64,
) -> NodeId {
    let values = attention_values_node(tape, x, partition, ids, eps);
    let projected = tape.matmul(values, ids.w_out);
    tape.add(x, projected)
}

/// One pre-norm transformer-style layer:
/// `h = x + proj(attn(LN1(x)))`, `out = h + FFN(LN2(h))`.
pub fn layer_node(
    tape: &mut Tape,
    x: NodeId,
    partition: &Partition,
    ids: &AttentionNodeIds,
    eps: f64,
) -> NodeId {
    let normed = tape.layer_norm(x, ids.norm1_gamma, ids.norm1_beta, LAYER_NORM_EPS);
    let values = attention_values_node(tape, normed, partition, ids, eps);
    let projected = tape.matmul(values, ids.w_out);
    let h = tape.add(x, projected);
    let normed2 = tape.layer_norm(h, ids.norm2_gamma, ids.norm2_beta, LAYER_NORM_EPS);
    let f1 = tape.matmul(normed2, ids.ffn_w1);
    let f1 = tape.add_row_broadcast(f1, ids.ffn_b1);
    let f1 = tape.relu(f1);
    let f2 = tape.matmul(f1, ids.ffn_w2);
    let f2 = tape.add_row_broadcast(f2, ids.ffn_b2);
    tape.add(h, f2)
}

fn run_on_tape(
    input: &SparseTensor,
    params: &AttentionParams,
    f: impl FnOnce(&mut Tape, NodeId, &AttentionNodeIds) -> NodeId,
) -> Result<SparseTensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.features().clone());
    let ids = AttentionNodeIds::register(&mut tape, params);
    let out = f(&mut tape, x, &ids);
    input.with_features(tape.value(out).clone())
}

fn check_attention_inputs(
    input: &SparseTensor,
    partition: &Partition,
    params: &AttentionParams,
    eps: f64,
) -> Result<()> {
    if partition.group.len() != input.len() {
        return Err(Error::DimensionMismatch {
            context: "partition rows",
            expected: input.len(),
            got: partition.group.len(),
        });
    }
    if params.w_q.rows() != input.channels() {
        return Err(Error::DimensionMismatch {
            context: "attention channels",
            expected: params.w_q.rows(),
            got: input.channels(),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::Invalid("attention eps must be > 0".into()));
    }
    Ok(())
}

/// Kernelized attention values only (before projection and residual); the
/// quantity the explicit per-group oracle reproduces.
pub fn linear_attention_values(
    input: &SparseTensor,
    partition: &Partition,
    params: &AttentionParams,
    eps: f64,
) -> Result<Matrix> {
    check_attention_inputs(input, partition, params, eps)?;
    let mut tape = Tape::new();
    let x = tape.leaf(input.features().clone());
    let ids = AttentionNodeIds::register(&mut tape, params);
    let out = attention_values_node(&mut tape, x, partition, &ids, eps);
    Ok(tape.value(out).clone())
}

/// Per-group linear attention with output projection and residual add.
/// Coordinates are unchanged.
pub fn linear_attention(
    input: &SparseTensor,
    partition: &Partition,
    params: &AttentionParams,
    eps: f64,
) -> Result<SparseTensor> {
    check_attention_inputs(input, partition, params, eps)?;
    run_on_tape(input, params, |tape, x, ids| {
        attention_node(tape, x, partition, ids, eps)
    })
}

/// One slot layer along `axis` (partition recomputed from current coords).
pub fn slot_layer(
    input: &SparseTensor,
    axis: SlotAxis,
    params: &AttentionParams,
    cfg: &SlotStackConfig,
) -> Result<SparseTensor> {
    let partition = Partition::from(&slot_partition(input, axis, cfg.width)?);
    check_attention_inputs(input, &partition, params, cfg.eps)?;
    run_on_tape(input, params, |tape, x, ids| {
        layer_node(tape, x, &partition, ids, cfg.eps)
    })
}

/// Stack of slot layers with axes alternating X, Y, X, Y, ...
pub fn slot_stack(
    input: &SparseTensor,
    layers: &[AttentionParams],
    cfg: &SlotStackConfig,
) -> Result<SparseTensor> {
    if layers.len() % 2 != 0 {
        return Err(Error::Invalid(alloc::format!(
            "slot stack layer count must be even, got {}",
            layers.len()
        )));
    }
    cfg.validate().ok();
    let mut current = input.clone();
    for (idx, params) in layers.iter().enumerate() {
        let axis = if idx % 2 == 0 { SlotAxis::X } else { SlotAxis::Y };
        current = slot_layer(&current, axis, params, cfg)?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{Coord, GridSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(w: u32, h: u32) -> GridSpec {
        GridSpec::new((0.0, 0.0), (1.0, 1.0), (w, h), 1).unwrap()
    }

    fn tensor(coords: &[(u32, u32)], g: &GridSpec, c: usize, seed: u64) -> SparseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feat = Matrix::from_fn(coords.len(), c, |_, _| rng.gen_range(-1.0..1.0));
        SparseTensor::new(
            g.clone(),
            coords.iter().map(|&(x, y)| Coord::new(x, y)).collect(),
            feat,
        )
        .unwrap()
    }

    #[test]
    fn slot_indices_follow_floor_rule() {
        let g = grid(64, 64);
        let t = tensor(&[(25, 7), (0, 0)], &g, 2, 0);
        let px = slot_partition(&t, SlotAxis::X, 12).unwrap();
        let py = slot_partition(&t, SlotAxis::Y, 12).unwrap();
        // Canonical order puts (0,0) first, (25,7) second.
        assert_eq!(px.slot_index, vec![0, 0]);
        assert_eq!(py.slot_index, vec![0, 2]);
        assert_eq!(px.slot_count, 6);
    }

    #[test]
    fn partition_recomputation_is_stable() {
        let g = grid(48, 48);
        let t = tensor(&[(3, 7), (40, 12), (9, 33)], &g, 2, 1);
        let p1 = slot_partition(&t, SlotAxis::X, 12).unwrap();
        let p2 = slot_partition(&t, SlotAxis::X, 12).unwrap();
        assert_eq!(p1, p2);
    }

    fn params(c: usize, hidden: usize, seed: u64) -> AttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionParams::init(&mut rng, c, hidden)
    }

    /// Params whose query/key projections are nonnegative, so positive
    /// features guarantee `q · kᵀ > 0` (the identity-limit precondition).
    fn positive_qk_params(c: usize, hidden: usize, seed: u64) -> AttentionParams {
        let mut p = params(c, hidden, seed);
        p.w_q = p.w_q.map(crate::math::abs);
        p.w_k = p.w_k.map(crate::math::abs);
        p
    }

    #[test]
    fn single_voxel_slot_returns_value_in_eps_limit() {
        let g = grid(16, 16);
        let mut t = tensor(&[(5, 5)], &g, 4, 2);
        t = t.with_features(t.features().map(|v| crate::math::abs(v) + 0.1)).unwrap();
        let p = positive_qk_params(4, 8, 3);
        let partition = Partition::from(&slot_partition(&t, SlotAxis::X, 12).unwrap());
        let values = linear_attention_values(&t, &partition, &p, 1e-14).unwrap();
        // Single-element slot: v' = (q·kᵀ v)/(q·kᵀ + eps) -> v as eps -> 0.
        let v = t.features().matmul(&p.w_v);
        assert!(values.max_abs_diff(&v) < 1e-9);
    }

    #[test]
    fn uniform_slot_returns_shared_value() {
        let g = grid(16, 16);
        let feat = Matrix::from_fn(3, 4, |_, j| 0.3 * (j as f64 + 1.0));
        let t = SparseTensor::new(
            g,
            vec![Coord::new(1, 2), Coord::new(5, 2), Coord::new(9, 2)],
            feat,
        )
        .unwrap();
        let p = positive_qk_params(4, 8, 4);
        let partition = Partition::from(&slot_partition(&t, SlotAxis::X, 12).unwrap());
        let values = linear_attention_values(&t, &partition, &p, 1e-12).unwrap();
        let v = t.features().matmul(&p.w_v);
        assert!(values.max_abs_diff(&v) < 1e-8);
    }

    #[test]
    fn attention_rejects_stale_partition() {
        let g = grid(16, 16);
        let t = tensor(&[(1, 1), (2, 2)], &g, 4, 5);
        let p = params(4, 8, 6);
        let bad = Partition {
            group: vec![0],
            num_groups: 1,
        };
        assert!(linear_attention(&t, &bad, &p, 1e-6).is_err());
    }

    #[test]
    fn zero_features_propagate_to_zero_with_zero_biases() {
        let g = grid(16, 16);
        let t = SparseTensor::new(
            g,
            vec![Coord::new(1, 1), Coord::new(4, 1)],
            Matrix::zeros(2, 4),
        )
        .unwrap();
        let p = params(4, 8, 7); // init uses zero biases and zero norm betas
        let cfg = SlotStackConfig {
            num_layers: 2,
            width: 12,
            ffn_hidden: 8,
            eps: 1e-6,
        };
        let out = slot_layer(&t, SlotAxis::X, &p, &cfg).unwrap();
        assert!(out.features().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stack_with_zero_layers_is_identity() {
        let g = grid(16, 16);
        let t = tensor(&[(1, 1), (2, 9)], &g, 4, 8);
        let cfg = SlotStackConfig {
            num_layers: 0,
            width: 12,
            ffn_hidden: 8,
            eps: 1e-6,
        };
        let out = slot_stack(&t, &[], &cfg).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn stack_rejects_odd_layer_count() {
        let g = grid(16, 16);
        let t = tensor(&[(1, 1)], &g, 4, 9);
        let cfg = SlotStackConfig {
            num_layers: 1,
            width: 12,
            ffn_hidden: 8,
            eps: 1e-6,
        };
        let layers = vec![params(4, 8, 10)];
        assert!(slot_stack(&t, &layers, &cfg).is_err());
    }

    #[test]
    fn coordinates_preserved_by_layers() {
        let g = grid(32, 32);
        let t = tensor(&[(1, 1), (30, 2), (9, 27), (14, 14)], &g, 4, 11);
        let cfg = SlotStackConfig {
            num_layers: 2,
            width: 12,
            ffn_hidden: 8,
            eps: 1e-6,
        };
        let layers = vec![params(4, 8, 12), params(4, 8, 13)];
        let out = slot_stack(&t, &layers, &cfg).unwrap();
        assert_eq!(out.coords(), t.coords());
        assert_eq!(out.grid(), t.grid());
    }

    #[test]
    fn x_layer_then_y_layer_mixes_cross_slot_voxels() {
        // Voxels in different X-slots but the same Y-slot: layer 1 (X axis)
        // keeps them independent, layer 2 (Y axis) mixes them.
        let g = grid(48, 48);
        let coords = [(5, 2), (5, 30)];
        let t = tensor(&coords, &g, 4, 14);
        let cfg = SlotStackConfig {
            num_layers: 2,
            width: 12,
            ffn_hidden: 8,
            eps: 1e-6,
        };
        let l1 = params(4, 8, 15);
        let l2 = params(4, 8, 16);

        let mut perturbed_feat = t.features().clone();
        perturbed_feat.set(0, 0, perturbed_feat.at(0, 0) + 0.25);
        let t2 = t.with_features(perturbed_feat).unwrap();

        let after_one = slot_layer(&t, SlotAxis::X, &l1, &cfg).unwrap();
        let after_one_p = slot_layer(&t2, SlotAxis::X, &l1, &cfg).unwrap();
        // Row 1 (the other voxel) is untouched after the X layer.
        assert_eq!(after_one.features().row(1), after_one_p.features().row(1));

        let after_two = slot_layer(&after_one, SlotAxis::Y, &l2, &cfg).unwrap();
        let after_two_p = slot_layer(&after_one_p, SlotAxis::Y, &l2, &cfg).unwrap();
        let d: f64 = after_two
            .features()
            .row(1)
            .iter()
            .zip(after_two_p.features().row(1))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(d > 1e-9, "Y layer should mix the two voxels, delta {d}");
    }

    #[test]
    fn window_partition_brackets_cells() {
        let g = grid(32, 32);
        let t = tensor(&[(0, 0), (7, 7), (8, 8), (31, 31)], &g, 2, 17);
        let p = window_partition(&t, 8).unwrap();
        assert_eq!(p.group[0], p.group[1]); // both in window (0,0)
        assert_ne!(p.group[1], p.group[2]);
        assert_eq!(p.num_groups, 3);
    }

    #[test]
    fn window_covering_grid_is_single_group() {
        let g = grid(16, 16);
        let t = tensor(&[(0, 0), (5, 9), (15, 15)], &g, 2, 18);
        let p = window_partition(&t, 16).unwrap();
        assert_eq!(p.num_groups, 1);
    }

    #[test]
    fn isolated_windows_are_identity_on_values() {
        let g = grid(32, 32);
        let mut t = tensor(&[(0, 0), (8, 8), (16, 16), (24, 24)], &g, 4, 19);
        t = t.with_features(t.features().map(|v| crate::math::abs(v) + 0.1)).unwrap();
        let p = window_partition(&t, 8).unwrap();
        assert_eq!(p.num_groups, 4);
        let ap = positive_qk_params(4, 8, 20);
        let values = linear_attention_values(&t, &p, &ap, 1e-14).unwrap();
        let v = t.features().matmul(&ap.w_v);
        assert!(values.max_abs_diff(&v) < 1e-9);
    }

    #[test]
    fn window_set_partition_chunks_in_canonical_order() {
        let g = grid(8, 8);
        let coords: Vec<(u32, u32)> = (0..6).map(|i| (i as u32, 0)).collect();
        let t = tensor(&coords, &g, 2, 21);
        let p = window_set_partition(&t, 8, 4).unwrap();
        assert_eq!(p.group, vec![0, 0, 0, 0, 1, 1]);
    }

    #[test]
    fn permutation_of_input_rows_is_canonicalized() {
        let g = grid(16, 16);
        let coords_a = vec![Coord::new(1, 1), Coord::new(9, 3), Coord::new(2, 7)];
        let coords_b = vec![Coord::new(2, 7), Coord::new(1, 1), Coord::new(9, 3)];
        let feat_a = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1);
        // feat_b rows permuted to match coords_b ordering of coords_a.
        let feat_b = Matrix::from_fn(3, 4, |i, j| {
            let orig = [2, 0, 1][i];
            (orig * 4 + j) as f64 * 0.1
        });
        let ta = SparseTensor::new(g.clone(), coords_a, feat_a).unwrap();
        let tb = SparseTensor::new(g, coords_b, feat_b).unwrap();
        assert_eq!(ta, tb);
        let p = params(4, 8, 22);
        let part = Partition::from(&slot_partition(&ta, SlotAxis::X, 4).unwrap());
        let oa = linear_attention(&ta, &part, &p, 1e-6).unwrap();
        let ob = linear_attention(&tb, &part, &p, 1e-6).unwrap();
        assert_eq!(oa, ob);
    }
}
