//! The end-to-end detector graph: voxel feature encoding, a small sparse-conv
//! encoder, the alternating-axis slot attention stack, sparse upsampling, and
//! a two-branch 1x1 prediction head.
//!
//! Encoder layout: `[submanifold k3, submanifold k3, regular k3 stride 2]`
//! per stage, ReLU after each convolution, channels doubling per stage.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::{decode_box, BoxPrediction, ENCODING_DIM};
use crate::error::{Error, Result};
use crate::math;
use crate::slot::{
    layer_node, slot_partition, window_partition, window_set_partition, AttentionNodeIds,
    Partition, SlotAxis,
};
use crate::sparse::{
    neighbor_plan, submanifold_conv, voxelize_raw, ConvKernel, ConvMode, Coord, GridSpec, Point,
    SparseTensor,
};
use crate::tape::{conv_node, NodeId, Tape};
use crate::tensor::Matrix;
use crate::upsample::UpsampleStrategy;

/// Named parameter tensors in a fixed registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Matrix)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: String, value: Matrix) -> usize {
        self.entries.push((name, value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    pub fn tensor(&self, slot: usize) -> &Matrix {
        &self.entries[slot].1
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Matrix {
        &mut self.entries[slot].1
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.entries.iter().map(|(_, m)| m).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.rows() * m.cols()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// How voxels are grouped for attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    /// Stripes alternating X/Y between layers.
    Slot,
    /// Square windows of the given side.
    Window { window: u32 },
    /// Square windows chunked into fixed-size sets.
    WindowSet { window: u32, set_size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub grid: GridSpec,
    /// Channels after the voxel feature embedding.
    pub base_channels: usize,
    /// Encoder stages; total downsampling is `2^encoder_depth`.
    pub encoder_depth: usize,
    /// Attention layers; must be even.
    pub slot_layers: usize,
    pub slot_width: u32,
    pub ffn_hidden: usize,
    pub attn_eps: f64,
    pub partition: PartitionKind,
    pub upsample: UpsampleStrategy,
    pub num_classes: usize,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.num_classes == 0 || self.ffn_hidden == 0 {
            return Err(Error::Invalid(
                "channels, classes, and ffn width must be positive".into(),
            ));
        }
        if self.slot_layers % 2 != 0 {
            return Err(Error::Invalid(format!(
                "slot layer count must be even, got {}",
                self.slot_layers
            )));
        }
        if self.slot_width == 0 {
            return Err(Error::Invalid("slot width must be >= 1".into()));
        }
        if !(self.attn_eps > 0.0) {
            return Err(Error::Invalid("attention eps must be > 0".into()));
        }
        if self.encoder_depth == 0 {
            return Err(Error::Invalid(
                "encoder needs at least one downsampling stage so upsampling has room".into(),
            ));
        }
        Ok(())
    }

    /// Channels at the encoder output (and through the head).
    pub fn head_channels(&self) -> usize {
        self.base_channels << self.encoder_depth
    }
}

struct StageSlots {
    sub0_w: usize,
    sub0_b: usize,
    sub1_w: usize,
    sub1_b: usize,
    down_w: usize,
    down_b: usize,
}

struct SlotLayerSlots {
    w_q: usize,
    w_k: usize,
    w_v: usize,
    w_out: usize,
    ffn_w1: usize,
    ffn_b1: usize,
    ffn_w2: usize,
    ffn_b2: usize,
    norm1_gamma: usize,
    norm1_beta: usize,
    norm2_gamma: usize,
    norm2_beta: usize,
}

struct Layout {
    vfe_w: usize,
    vfe_b: usize,
    stages: Vec<StageSlots>,
    slot_layers: Vec<SlotLayerSlots>,
    up_w: usize,
    up_b: usize,
    cls0_w: usize,
    cls0_b: usize,
    cls1_w: usize,
    cls1_b: usize,
    reg0_w: usize,
    reg0_b: usize,
    reg1_w: usize,
    reg1_b: usize,
}

/// Logit bias putting the initial foreground probability at ~0.1, which keeps
/// early classification gradients from being dominated by the negatives.
const CLS_PRIOR_LOGIT: f64 = -2.197224577336219;

pub struct SlotDetector {
    pub cfg: DetectorConfig,
    pub params: ParamSet,
    layout: Layout,
}

impl SlotDetector {
    /// Builds the parameter set with uniform `±sqrt(1/fan_in)` weights, zero
    /// biases (except the score prior and the unit cosine slot of the
    /// regression bias), and identity norms.
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        // Weights and biases draw from the fan-in-scaled uniform range.
        // Nonzero biases keep pre-activations of dead-input cells off the
        // exact ReLU kink, which finite-difference checks probe directly.
        let mut draw = |params: &mut ParamSet, name: String, rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / math::sqrt(fan_in as f64);
            let m = Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound));
            params.push(name, m)
        };
        let mut init = |params: &mut ParamSet, name: String, rows: usize, cols: usize| {
            draw(params, name, rows, cols, rows)
        };

        let c0 = cfg.base_channels;
        let vfe_w = init(&mut params, "vfe.weight".into(), 4, c0);
        let vfe_b = init_bias(&mut params, "vfe.bias".into(), 4, c0);

        let mut stages = Vec::with_capacity(cfg.encoder_depth);
        let mut c = c0;
        for s in 0..cfg.encoder_depth {
            let sub0_w = init(&mut params, format!("enc{s}.sub0.weight"), 9 * c, c);
            let sub0_b = init_bias(&mut params, format!("enc{s}.sub0.bias"), 9 * c, c);
            let sub1_w = init(&mut params, format!("enc{s}.sub1.weight"), 9 * c, c);
            let sub1_b = init_bias(&mut params, format!("enc{s}.sub1.bias"), 9 * c, c);
            let down_w = init(&mut params, format!("enc{s}.down.weight"), 9 * c, 2 * c);
            let down_b = init_bias(&mut params, format!("enc{s}.down.bias"), 9 * c, 2 * c);
            stages.push(StageSlots {
                sub0_w,
                sub0_b,
                sub1_w,
                sub1_b,
                down_w,
                down_b,
            });
            c *= 2;
        }

        let mut slot_layers = Vec::with_capacity(cfg.slot_layers);
        for i in 0..cfg.slot_layers {
            let w_q = init(&mut params, format!("slot{i}.wq"), c, c);
            let w_k = init(&mut params, format!("slot{i}.wk"), c, c);
            let w_v = init(&mut params, format!("slot{i}.wv"), c, c);
            let w_out = init(&mut params, format!("slot{i}.wout"), c, c);
            let ffn_w1 = init(&mut params, format!("slot{i}.ffn.w1"), c, cfg.ffn_hidden);
            let ffn_b1 = init_bias(&mut params, format!("slot{i}.ffn.b1"), c, cfg.ffn_hidden);
            let ffn_w2 = init(&mut params, format!("slot{i}.ffn.w2"), cfg.ffn_hidden, c);
            let ffn_b2 = init_bias(&mut params, format!("slot{i}.ffn.b2"), cfg.ffn_hidden, c);
            let norm1_gamma = params.push(format!("slot{i}.norm1.gamma"), Matrix::filled(1, c, 1.0));
            let norm1_beta = params.push(format!("slot{i}.norm1.beta"), Matrix::zeros(1, c));
            let norm2_gamma = params.push(format!("slot{i}.norm2.gamma"), Matrix::filled(1, c, 1.0));
            let norm2_beta = params.push(format!("slot{i}.norm2.beta"), Matrix::zeros(1, c));
            slot_layers.push(SlotLayerSlots {
                w_q,
                w_k,
                w_v,
                w_out,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                norm1_gamma,
                norm1_beta,
                norm2_gamma,
                norm2_beta,
            });
        }

        let up_w = init(&mut params, "up.weight".into(), 9 * c, c);
        let up_b = init_bias(&mut params, "up.bias".into(), 9 * c, c);

        let cls0_w = init(&mut params, "head.cls0.weight".into(), c, c);
        let cls0_b = init_bias(&mut params, "head.cls0.bias".into(), c, c);
        let cls1_w = init(&mut params, "head.cls1.weight".into(), c, cfg.num_classes);
        let cls1_b = params.push(
            "head.cls1.bias".into(),
            Matrix::filled(1, cfg.num_classes, CLS_PRIOR_LOGIT),
        );
        let reg0_w = init(&mut params, "head.reg0.weight".into(), c, c);
        let reg0_b = init_bias(&mut params, "head.reg0.bias".into(), c, c);
        let reg1_w = init(&mut params, "head.reg1.weight".into(), c, ENCODING_DIM);
        let mut reg_bias = Matrix::zeros(1, ENCODING_DIM);
        reg_bias.set(0, ENCODING_DIM - 1, 1.0); // unit cosine: yaw starts at 0
        let reg1_b = params.push("head.reg1.bias".into(), reg_bias);

        Ok(SlotDetector {
            cfg,
            params,
            layout: Layout {
                vfe_w,
                vfe_b,
                stages,
                slot_layers,
                up_w,
                up_b,
                cls0_w,
                cls0_b,
                cls1_w,
                cls1_b,
                reg0_w,
                reg0_b,
                reg1_w,
                reg1_b,
            },
        })
    }

    fn partition_for_layer(
        &self,
        tensor_coords: &SparseTensor,
        layer_idx: usize,
    ) -> Result<Partition> {
        match self.cfg.partition {
            PartitionKind::Slot => {
                let axis = if layer_idx % 2 == 0 {
                    SlotAxis::X
                } else {
                    SlotAxis::Y
                };
                Ok(Partition::from(&slot_partition(
                    tensor_coords,
                    axis,
                    self.cfg.slot_width,
                )?))
            }
            PartitionKind::Window { window } => window_partition(tensor_coords, window),
            PartitionKind::WindowSet { window, set_size } => {
                window_set_partition(tensor_coords, window, set_size)
            }
        }
    }

    /// Traced forward pass from raw points. Registers every parameter on the
    /// tape (ids land in `param_nodes`, aligned with `params` slots).
    pub fn forward(&self, tape: &mut Tape, points: &[Point]) -> Result<ForwardOutput> {
        let (raw, _) = voxelize_raw(points, &self.cfg.grid)?;
        self.forward_voxels(tape, &raw)
    }

    /// Traced forward from an already-voxelized raw (4-channel) tensor.
    pub fn forward_voxels(&self, tape: &mut Tape, raw: &SparseTensor) -> Result<ForwardOutput> {
        if raw.channels() != 4 {
            return Err(Error::DimensionMismatch {
                context: "raw voxel features",
                expected: 4,
                got: raw.channels(),
            });
        }
        if raw.is_empty() {
            return Err(Error::EmptyInput("forward on an empty voxel tensor"));
        }
        let ids: Vec<NodeId> = (0..self.params.len())
            .map(|slot| tape.leaf(self.params.tensor(slot).clone()))
            .collect();
        let lay = &self.layout;

        // Voxel feature embedding (linear).
        let mut x = tape.leaf(raw.features().clone());
        x = tape.matmul(x, ids[lay.vfe_w]);
        x = tape.add_row_broadcast(x, ids[lay.vfe_b]);

        let mut grid = raw.grid().clone();
        let mut coords: Vec<Coord> = raw.coords().to_vec();

        // Encoder stages.
        for stage in &lay.stages {
            for (w, b) in [(stage.sub0_w, stage.sub0_b), (stage.sub1_w, stage.sub1_b)] {
                let plan = neighbor_plan(&coords, &grid, 3, ConvMode::Submanifold, 1);
                x = conv_node(tape, x, ids[w], ids[b], &plan);
                x = tape.relu(x);
            }
            let plan = neighbor_plan(&coords, &grid, 3, ConvMode::Regular, 2);
            x = conv_node(tape, x, ids[stage.down_w], ids[stage.down_b], &plan);
            x = tape.relu(x);
            coords = plan.out_coords;
            grid = plan.out_grid;
        }

        // Attention stack. Partitions only need coordinates; wrap them in a
        // featureless tensor at the current grid level.
        if self.cfg.slot_layers > 0 {
            let coord_view =
                SparseTensor::new(grid.clone(), coords.clone(), Matrix::zeros(coords.len(), 0))?;
            for (i, slots) in lay.slot_layers.iter().enumerate() {
                let partition = self.partition_for_layer(&coord_view, i)?;
                let node_ids = AttentionNodeIds {
                    w_q: ids[slots.w_q],
                    w_k: ids[slots.w_k],
                    w_v: ids[slots.w_v],
                    w_out: ids[slots.w_out],
                    ffn_w1: ids[slots.ffn_w1],
                    ffn_b1: ids[slots.ffn_b1],
                    ffn_w2: ids[slots.ffn_w2],
                    ffn_b2: ids[slots.ffn_b2],
                    norm1_gamma: ids[slots.norm1_gamma],
                    norm1_beta: ids[slots.norm1_beta],
                    norm2_gamma: ids[slots.norm2_gamma],
                    norm2_beta: ids[slots.norm2_beta],
                };
                x = layer_node(tape, x, &partition, &node_ids, self.cfg.attn_eps);
            }
        }

        // Sparse upsampling.
        match self.cfg.upsample {
            UpsampleStrategy::SpSu => {
                let fine_grid = grid.upsampled()?;
                let doubled: Vec<Coord> = coords
                    .iter()
                    .map(|co| Coord::new(co.ix * 2, co.iy * 2))
                    .collect();
                let plan = neighbor_plan(&doubled, &fine_grid, 3, ConvMode::Regular, 1);
                x = conv_node(tape, x, ids[lay.up_w], ids[lay.up_b], &plan);
                x = tape.relu(x);
                coords = plan.out_coords;
                grid = plan.out_grid;
            }
            UpsampleStrategy::SmSu => {
                let fine_grid = grid.upsampled()?;
                let (fine_coords, src_rows) = repeat_plan(&coords);
                x = tape.gather_rows(x, src_rows);
                let plan = neighbor_plan(&fine_coords, &fine_grid, 3, ConvMode::Submanifold, 1);
                x = conv_node(tape, x, ids[lay.up_w], ids[lay.up_b], &plan);
                x = tape.relu(x);
                coords = fine_coords;
                grid = fine_grid;
            }
        }

        // Two-branch head of 1x1 submanifold convolutions (pointwise linear).
        let mut cls = tape.matmul(x, ids[lay.cls0_w]);
        cls = tape.add_row_broadcast(cls, ids[lay.cls0_b]);
        cls = tape.relu(cls);
        let mut logits = tape.matmul(cls, ids[lay.cls1_w]);
        logits = tape.add_row_broadcast(logits, ids[lay.cls1_b]);
        let scores = tape.logistic(logits);

        let mut reg = tape.matmul(x, ids[lay.reg0_w]);
        reg = tape.add_row_broadcast(reg, ids[lay.reg0_b]);
        reg = tape.relu(reg);
        let mut encodings = tape.matmul(reg, ids[lay.reg1_w]);
        encodings = tape.add_row_broadcast(encodings, ids[lay.reg1_b]);

        Ok(ForwardOutput {
            head_grid: grid,
            head_coords: coords,
            logits,
            scores,
            encodings,
            param_nodes: ids,
        })
    }

    /// Forward plus decoding; no gradients retained.
    pub fn predict(&self, points: &[Point]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, points)?;
        let scores = tape.value(fwd.scores).clone();
        let encodings = tape.value(fwd.encodings).clone();
        let boxes = decode_rows(&scores, &encodings, &fwd.head_grid, &fwd.head_coords)?;
        Ok(Prediction {
            head_grid: fwd.head_grid,
            head_coords: fwd.head_coords,
            scores,
            encodings,
            boxes,
        })
    }
}

/// Fine coordinates (canonical order) and the coarse source row of each, for
/// the repeat-into-2x2-blocks upsampling path.
fn repeat_plan(coords: &[Coord]) -> (Vec<Coord>, Vec<usize>) {
    let mut pairs: Vec<(Coord, usize)> = Vec::with_capacity(coords.len() * 4);
    for (row, &c) in coords.iter().enumerate() {
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            pairs.push((Coord::new(c.ix * 2 + dx, c.iy * 2 + dy), row));
        }
    }
    pairs.sort_by_key(|&(c, _)| c);
    let fine_coords = pairs.iter().map(|&(c, _)| c).collect();
    let src_rows = pairs.iter().map(|&(_, r)| r).collect();
    (fine_coords, src_rows)
}

/// Traced forward results: head geometry plus score/encoding nodes.
pub struct ForwardOutput {
    pub head_grid: GridSpec,
    pub head_coords: Vec<Coord>,
    pub logits: NodeId,
    pub scores: NodeId,
    pub encodings: NodeId,
    /// One node per parameter slot, in `ParamSet` order.
    pub param_nodes: Vec<NodeId>,
}

/// Detached prediction for a scene.
pub struct Prediction {
    pub head_grid: GridSpec,
    pub head_coords: Vec<Coord>,
    pub scores: Matrix,
    pub encodings: Matrix,
    pub boxes: Vec<BoxPrediction>,
}

/// Decodes every head row into a box prediction.
pub fn decode_rows(
    scores: &Matrix,
    encodings: &Matrix,
    grid: &GridSpec,
    coords: &[Coord],
) -> Result<Vec<BoxPrediction>> {
    if scores.rows() != coords.len() || encodings.rows() != coords.len() {
        return Err(Error::DimensionMismatch {
            context: "decode rows",
            expected: coords.len(),
            got: scores.rows(),
        });
    }
    let mut out = Vec::with_capacity(coords.len());
    for (row, &c) in coords.iter().enumerate() {
        let center = grid.cell_center(c);
        out.push(decode_box(
            encodings.row(row),
            center,
            scores.row(row).to_vec(),
        )?);
    }
    Ok(out)
}

/// Standalone two-branch prediction head parameters (each branch is two 1x1
/// submanifold convolutions with a ReLU between).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub cls0_w: Matrix,
    pub cls0_b: Matrix,
    pub cls1_w: Matrix,
    pub cls1_b: Matrix,
    pub reg0_w: Matrix,
    pub reg0_b: Matrix,
    pub reg1_w: Matrix,
    pub reg1_b: Matrix,
}

/// Pure prediction head on a sparse tensor; coordinates are preserved.
/// Classification outputs go through the logistic squashing.
pub fn prediction_head(
    voxels: &SparseTensor,
    params: &HeadParams,
) -> Result<(Matrix, Matrix)> {
    let c = voxels.channels();
    let k1 = |w: &Matrix, b: &Matrix| {
        ConvKernel::new(
            1,
            w.rows(),
            w.cols(),
            w.clone(),
            b.clone(),
            ConvMode::Submanifold,
            1,
        )
    };
    let relu = |t: SparseTensor| {
        let f = t.features().map(|v| if v > 0.0 { v } else { 0.0 });
        t.with_features(f)
    };
    if params.cls0_w.rows() != c || params.reg0_w.rows() != c {
        return Err(Error::DimensionMismatch {
            context: "prediction head input channels",
            expected: params.cls0_w.rows(),
            got: c,
        });
    }
    let cls = submanifold_conv(voxels, &k1(&params.cls0_w, &params.cls0_b)?)?;
    let cls = relu(cls)?;
    let cls = submanifold_conv(&cls, &k1(&params.cls1_w, &params.cls1_b)?)?;
    let scores = cls.features().map(math::logistic);
    let reg = submanifold_conv(voxels, &k1(&params.reg0_w, &params.reg0_b)?)?;
    let reg = relu(reg)?;
    let reg = submanifold_conv(&reg, &k1(&params.reg1_w, &params.reg1_b)?)?;
    Ok((scores, reg.features().clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};
    use crate::sparse::GridSpec;

    fn small_cfg() -> DetectorConfig {
        DetectorConfig {
            grid: GridSpec::new((-5.12, -5.12), (0.32, 0.32), (32, 32), 1).unwrap(),
            base_channels: 4,
            encoder_depth: 1,
            slot_layers: 2,
            slot_width: 6,
            ffn_hidden: 8,
            attn_eps: 1e-6,
            partition: PartitionKind::Slot,
            upsample: UpsampleStrategy::SpSu,
            num_classes: 2,
        }
    }

    fn small_scene(seed: u64) -> (Vec<Point>, Vec<crate::boxes::BoxLabel>) {
        let spec = SceneSpec {
            seed,
            origin: (-5.12, -5.12),
            size: (10.24, 10.24),
            num_objects: (1, 2),
            points_per_object: (6, 10),
            clutter_density: 0.05,
            margin: 0.5,
            ..SceneSpec::default()
        };
        generate_scene(&spec).unwrap()
    }

    #[test]
    fn forward_produces_aligned_outputs() {
        let model = SlotDetector::new(small_cfg(), 7).unwrap();
        let (points, _) = small_scene(3);
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &points).unwrap();
        let n = fwd.head_coords.len();
        assert!(n > 0);
        assert_eq!(tape.value(fwd.scores).shape(), (n, 2));
        assert_eq!(tape.value(fwd.encodings).shape(), (n, ENCODING_DIM));
        // Upsample brings the grid back to half the base stride budget:
        // depth 1 encoder (stride 2) then one upsample -> stride 1.
        assert_eq!(fwd.head_grid.stride, 1);
        for &c in &fwd.head_coords {
            assert!(fwd.head_grid.contains(c));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = SlotDetector::new(small_cfg(), 7).unwrap();
        let (points, _) = small_scene(4);
        let a = model.predict(&points).unwrap();
        let b = model.predict(&points).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.encodings, b.encodings);
    }

    #[test]
    fn empty_scene_is_rejected() {
        let model = SlotDetector::new(small_cfg(), 7).unwrap();
        assert!(model.predict(&[]).is_err());
    }

    #[test]
    fn zero_weight_head_gives_half_scores_and_zero_encodings() {
        let c = 4;
        let grid = GridSpec::new((0.0, 0.0), (1.0, 1.0), (8, 8), 1).unwrap();
        let t = SparseTensor::new(
            grid,
            alloc::vec![Coord::new(1, 1), Coord::new(3, 2)],
            Matrix::from_fn(2, c, |i, j| (i + j) as f64 * 0.1),
        )
        .unwrap();
        let hp = HeadParams {
            cls0_w: Matrix::zeros(c, c),
            cls0_b: Matrix::zeros(1, c),
            cls1_w: Matrix::zeros(c, 2),
            cls1_b: Matrix::zeros(1, 2),
            reg0_w: Matrix::zeros(c, c),
            reg0_b: Matrix::zeros(1, c),
            reg1_w: Matrix::zeros(c, ENCODING_DIM),
            reg1_b: Matrix::zeros(1, ENCODING_DIM),
        };
        let (scores, enc) = prediction_head(&t, &hp).unwrap();
        assert!(scores.data().iter().all(|&s| s == 0.5));
        assert!(enc.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn head_equals_rowwise_mlp() {
        let c = 6;
        let grid = GridSpec::new((0.0, 0.0), (1.0, 1.0), (16, 16), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut mat = |r: usize, cl: usize| Matrix::from_fn(r, cl, |_, _| rng.gen_range(-0.7..0.7));
        let t = SparseTensor::new(
            grid,
            alloc::vec![Coord::new(1, 1), Coord::new(5, 9), Coord::new(12, 3)],
            mat(3, c),
        )
        .unwrap();
        let hp = HeadParams {
            cls0_w: mat(c, c),
            cls0_b: mat(1, c),
            cls1_w: mat(c, 2),
            cls1_b: mat(1, 2),
            reg0_w: mat(c, c),
            reg0_b: mat(1, c),
            reg1_w: mat(c, ENCODING_DIM),
            reg1_b: mat(1, ENCODING_DIM),
        };
        let (scores, enc) = prediction_head(&t, &hp).unwrap();
        // Row-wise two-layer MLP oracle.
        for row in 0..t.len() {
            let x = Matrix::from_vec(1, c, t.features().row(row).to_vec());
            let h = x.matmul(&hp.cls0_w).add(&hp.cls0_b).map(|v| v.max(0.0));
            let logits = h.matmul(&hp.cls1_w).add(&hp.cls1_b);
            for j in 0..2 {
                let expected = math::logistic(logits.at(0, j));
                assert!((scores.at(row, j) - expected).abs() < 1e-12);
            }
            let hr = x.matmul(&hp.reg0_w).add(&hp.reg0_b).map(|v| v.max(0.0));
            let er = hr.matmul(&hp.reg1_w).add(&hp.reg1_b);
            for j in 0..ENCODING_DIM {
                assert!((enc.at(row, j) - er.at(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn initial_predictions_have_zero_yaw() {
        let model = SlotDetector::new(small_cfg(), 21).unwrap();
        let (points, _) = small_scene(9);
        let pred = model.predict(&points).unwrap();
        // With the fresh regression branch near zero and the cosine bias at 1,
        // decoded yaw starts well inside the principal range.
        for b in &pred.boxes {
            assert!(b.yaw.abs() < core::f64::consts::FRAC_PI_2);
            assert!(b.l > 0.0 && b.w > 0.0 && b.h > 0.0);
        }
    }
}
