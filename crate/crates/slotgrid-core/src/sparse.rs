//! Sparse 2D voxel tensors: voxelization, submanifold and regular sparse
//! convolution, and dense-grid conversions.
//!
//! Coordinates are kept in canonical order (ascending `iy`, then `ix`) after
//! every operation, and row lookup is a binary search over that order. All
//! neighbor reductions accumulate in canonical order so outputs are
//! bit-reproducible.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Matrix;

/// A LiDAR return: position in meters plus a unitless intensity in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Point { x, y, z, intensity }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// Cell index within a grid. Ordering is canonical row order: `iy`, then `ix`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Coord {
    pub ix: u32,
    pub iy: u32,
}

impl Coord {
    pub fn new(ix: u32, iy: u32) -> Self {
        Coord { ix, iy }
    }
}

impl Ord for Coord {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        (self.iy, self.ix).cmp(&(other.iy, other.ix))
    }
}

impl PartialOrd for Coord {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Geometry of one grid level.
///
/// `stride` is the downsampling factor relative to the base grid; `voxel_size`
/// is the cell size in meters at this level.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub origin: (f64, f64),
    pub voxel_size: (f64, f64),
    pub extent: (u32, u32),
    pub stride: u32,
}

impl GridSpec {
    pub fn new(
        origin: (f64, f64),
        voxel_size: (f64, f64),
        extent: (u32, u32),
        stride: u32,
    ) -> Result<Self> {
        if !(voxel_size.0 > 0.0 && voxel_size.1 > 0.0) {
            return Err(Error::Invalid(format!(
                "voxel_size must be positive, got ({}, {})",
                voxel_size.0, voxel_size.1
            )));
        }
        if extent.0 == 0 || extent.1 == 0 {
            return Err(Error::Invalid(format!(
                "extent must be positive, got ({}, {})",
                extent.0, extent.1
            )));
        }
        if stride == 0 || !stride.is_power_of_two() {
            return Err(Error::Invalid(format!(
                "stride must be a power of two >= 1, got {stride}"
            )));
        }
        if !(origin.0.is_finite() && origin.1.is_finite()) {
            return Err(Error::NonFinite("grid origin"));
        }
        Ok(GridSpec {
            origin,
            voxel_size,
            extent,
            stride,
        })
    }

    #[inline]
    pub fn contains(&self, c: Coord) -> bool {
        c.ix < self.extent.0 && c.iy < self.extent.1
    }

    /// Cell containing a metric position, if inside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<Coord> {
        let fx = crate::math::floor((x - self.origin.0) / self.voxel_size.0);
        let fy = crate::math::floor((y - self.origin.1) / self.voxel_size.1);
        if fx < 0.0 || fy < 0.0 || fx >= self.extent.0 as f64 || fy >= self.extent.1 as f64 {
            return None;
        }
        Some(Coord::new(fx as u32, fy as u32))
    }

    /// Metric center of a cell.
    pub fn cell_center(&self, c: Coord) -> (f64, f64) {
        (
            self.origin.0 + (c.ix as f64 + 0.5) * self.voxel_size.0,
            self.origin.1 + (c.iy as f64 + 0.5) * self.voxel_size.1,
        )
    }

    /// Grid one stride level down: extent halved (rounded up), cells doubled.
    pub fn downsampled(&self) -> GridSpec {
        GridSpec {
            origin: self.origin,
            voxel_size: (self.voxel_size.0 * 2.0, self.voxel_size.1 * 2.0),
            extent: (self.extent.0.div_ceil(2), self.extent.1.div_ceil(2)),
            stride: self.stride * 2,
        }
    }

    /// Grid one stride level up: extent doubled, cells halved.
    pub fn upsampled(&self) -> Result<GridSpec> {
        if self.stride < 2 {
            return Err(Error::Invalid(format!(
                "cannot upsample a grid at stride {}; base resolution reached",
                self.stride
            )));
        }
        Ok(GridSpec {
            origin: self.origin,
            voxel_size: (self.voxel_size.0 * 0.5, self.voxel_size.1 * 0.5),
            extent: (self.extent.0 * 2, self.extent.1 * 2),
            stride: self.stride / 2,
        })
    }
}

/// Set of occupied cells with one feature row per cell.
///
/// Invariants: coordinates are pairwise distinct, inside the extent, sorted in
/// canonical order, and `features` has exactly one finite row per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    grid: GridSpec,
    coords: Vec<Coord>,
    features: Matrix,
}

impl SparseTensor {
    /// Builds a tensor, canonicalizing row order. Rejects duplicate or
    /// out-of-extent coordinates and non-finite features.
    pub fn new(grid: GridSpec, coords: Vec<Coord>, features: Matrix) -> Result<Self> {
        if coords.len() != features.rows() {
            return Err(Error::DimensionMismatch {
                context: "SparseTensor rows",
                expected: coords.len(),
                got: features.rows(),
            });
        }
        for &c in &coords {
            if !grid.contains(c) {
                return Err(Error::Invalid(format!(
                    "coordinate ({}, {}) outside extent ({}, {})",
                    c.ix, c.iy, grid.extent.0, grid.extent.1
                )));
            }
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("sparse tensor features"));
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&i| coords[i]);
        for w in order.windows(2) {
            if coords[w[0]] == coords[w[1]] {
                return Err(Error::Invalid(format!(
                    "duplicate coordinate ({}, {})",
                    coords[w[0]].ix, coords[w[0]].iy
                )));
            }
        }
        let cols = features.cols();
        let sorted_coords: Vec<Coord> = order.iter().map(|&i| coords[i]).collect();
        let mut sorted_feat = Matrix::zeros(coords.len(), cols);
        for (new_row, &old_row) in order.iter().enumerate() {
            sorted_feat.row_mut(new_row).copy_from_slice(features.row(old_row));
        }
        Ok(SparseTensor {
            grid,
            coords: sorted_coords,
            features: sorted_feat,
        })
    }

    pub fn empty(grid: GridSpec, channels: usize) -> Self {
        SparseTensor {
            grid,
            coords: Vec::new(),
            features: Matrix::zeros(0, channels),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    #[inline]
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    #[inline]
    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    #[inline]
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Row index of a coordinate: binary search over the canonical order.
    pub fn row_of(&self, c: Coord) -> Option<usize> {
        self.coords.binary_search(&c).ok()
    }

    /// Metric center of the cell backing a row.
    pub fn row_center(&self, row: usize) -> (f64, f64) {
        self.grid.cell_center(self.coords[row])
    }

    /// Same coordinates, new features (width may change).
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.rows() != self.coords.len() {
            return Err(Error::DimensionMismatch {
                context: "with_features rows",
                expected: self.coords.len(),
                got: features.rows(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("sparse tensor features"));
        }
        Ok(SparseTensor {
            grid: self.grid.clone(),
            coords: self.coords.clone(),
            features,
        })
    }
}

/// Linear feature embedding (used by the voxel feature encoder).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearMap {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::DimensionMismatch {
                context: "LinearMap bias",
                expected: weight.cols(),
                got: bias.cols(),
            });
        }
        if !weight.is_finite() || !bias.is_finite() {
            return Err(Error::NonFinite("linear map parameters"));
        }
        Ok(LinearMap { weight, bias })
    }

    /// 4 -> 4 identity embedding; convenient for tests of the raw features.
    pub fn identity(dim: usize) -> Self {
        LinearMap {
            weight: Matrix::eye(dim, dim),
            bias: Matrix::zeros(1, dim),
        }
    }

    pub fn apply(&self, input: &Matrix) -> Matrix {
        let mut out = input.matmul(&self.weight);
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let v = out.at(i, j) + self.bias.at(0, j);
                out.set(i, j, v);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VoxelizeStats {
    /// Points that fell outside the grid extent and were dropped.
    pub dropped_points: usize,
}

/// Mean-pools `(x_rel, y_rel, z, intensity)` per occupied cell, where
/// `(x_rel, y_rel)` are metric offsets from the cell center.
pub fn voxelize_raw(points: &[Point], grid: &GridSpec) -> Result<(SparseTensor, VoxelizeStats)> {
    for p in points {
        if !p.is_finite() {
            return Err(Error::NonFinite("input point"));
        }
    }
    let mut cells: BTreeMap<Coord, ([f64; 4], usize)> = BTreeMap::new();
    let mut dropped = 0usize;
    for p in points {
        match grid.cell_of(p.x, p.y) {
            Some(c) => {
                let center = grid.cell_center(c);
                let e = cells.entry(c).or_insert(([0.0; 4], 0));
                e.0[0] += p.x - center.0;
                e.0[1] += p.y - center.1;
                e.0[2] += p.z;
                e.0[3] += p.intensity;
                e.1 += 1;
            }
            None => dropped += 1,
        }
    }
    if cells.is_empty() {
        return Err(Error::EmptyInput("no point falls inside the grid extent"));
    }
    let n = cells.len();
    let mut coords = Vec::with_capacity(n);
    let mut feat = Matrix::zeros(n, 4);
    for (row, (c, (sums, count))) in cells.into_iter().enumerate() {
        coords.push(c);
        let inv = 1.0 / count as f64;
        for j in 0..4 {
            feat.set(row, j, sums[j] * inv);
        }
    }
    let tensor = SparseTensor {
        grid: grid.clone(),
        coords,
        features: feat,
    };
    Ok((
        tensor,
        VoxelizeStats {
            dropped_points: dropped,
        },
    ))
}

/// Voxel feature encoding: per-cell mean of `(x_rel, y_rel, z, intensity)`
/// passed through a linear embedding.
pub fn voxelize(points: &[Point], grid: &GridSpec, embed: &LinearMap) -> Result<SparseTensor> {
    let (raw, _) = voxelize_raw(points, grid)?;
    if embed.weight.rows() != 4 {
        return Err(Error::DimensionMismatch {
            context: "voxelize embed input width",
            expected: 4,
            got: embed.weight.rows(),
        });
    }
    let features = embed.apply(raw.features());
    raw.with_features(features)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// Output occupancy equals input occupancy.
    Submanifold,
    /// Output occupancy is every cell reachable by the kernel footprint.
    Regular,
}

/// A `k x k` convolution kernel over `c_in`-wide features.
///
/// Weights are stored as a `(k*k*c_in) x c_out` matrix; tap blocks are laid
/// out by kernel offset `(dy, dx)` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    size: usize,
    c_in: usize,
    c_out: usize,
    weights: Matrix,
    bias: Matrix,
    mode: ConvMode,
    stride: u32,
}

impl ConvKernel {
    pub fn new(
        size: usize,
        c_in: usize,
        c_out: usize,
        weights: Matrix,
        bias: Matrix,
        mode: ConvMode,
        stride: u32,
    ) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::Invalid(format!("kernel size must be odd, got {size}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::Invalid(format!("kernel stride must be 1 or 2, got {stride}")));
        }
        if mode == ConvMode::Submanifold && stride != 1 {
            return Err(Error::Invalid(
                "submanifold kernels require stride 1".into(),
            ));
        }
        let expected_rows = size * size * c_in;
        if weights.shape() != (expected_rows, c_out) {
            return Err(Error::DimensionMismatch {
                context: "ConvKernel weights rows",
                expected: expected_rows,
                got: weights.rows(),
            });
        }
        if bias.shape() != (1, c_out) {
            return Err(Error::DimensionMismatch {
                context: "ConvKernel bias",
                expected: c_out,
                got: bias.cols(),
            });
        }
        if !weights.is_finite() || !bias.is_finite() {
            return Err(Error::NonFinite("kernel parameters"));
        }
        Ok(ConvKernel {
            size,
            c_in,
            c_out,
            weights,
            bias,
            mode,
            stride,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }
    pub fn c_in(&self) -> usize {
        self.c_in
    }
    pub fn c_out(&self) -> usize {
        self.c_out
    }
    pub fn mode(&self) -> ConvMode {
        self.mode
    }
    pub fn stride(&self) -> u32 {
        self.stride
    }
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }
    pub fn bias(&self) -> &Matrix {
        &self.bias
    }

    /// Weight entry for kernel offset `(dy, dx)` (offsets in `-r..=r`).
    pub fn weight_at(&self, dy: i64, dx: i64, ci: usize, co: usize) -> f64 {
        let r = (self.size / 2) as i64;
        let tap = ((dy + r) as usize * self.size + (dx + r) as usize) * self.c_in + ci;
        self.weights.at(tap, co)
    }
}

/// Sentinel for "no source row" in a [`NeighborPlan`].
pub const NO_SRC: u32 = u32::MAX;

/// Gather plan mapping each output row and kernel tap to an input row.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborPlan {
    pub out_grid: GridSpec,
    pub out_coords: Vec<Coord>,
    pub taps: usize,
    /// `out_coords.len() * taps` entries; `NO_SRC` marks an absent neighbor.
    pub src: Vec<u32>,
}

impl NeighborPlan {
    #[inline]
    pub fn src_at(&self, out_row: usize, tap: usize) -> Option<usize> {
        let v = self.src[out_row * self.taps + tap];
        if v == NO_SRC {
            None
        } else {
            Some(v as usize)
        }
    }
}

fn coord_lookup(coords: &[Coord], c: Coord) -> u32 {
    match coords.binary_search(&c) {
        Ok(i) => i as u32,
        Err(_) => NO_SRC,
    }
}

/// Builds the gather plan for a convolution over `coords`.
///
/// Output row `o` at coordinate `c` reads input cell `stride*c + (dx, dy)` for
/// each kernel tap; absent neighbors contribute zero (zero padding).
pub fn neighbor_plan(
    coords: &[Coord],
    grid: &GridSpec,
    size: usize,
    mode: ConvMode,
    stride: u32,
) -> NeighborPlan {
    let r = (size / 2) as i64;
    let taps = size * size;
    let (out_grid, out_coords): (GridSpec, Vec<Coord>) = match mode {
        ConvMode::Submanifold => (grid.clone(), coords.to_vec()),
        ConvMode::Regular => {
            let out_grid = if stride == 2 {
                grid.downsampled()
            } else {
                grid.clone()
            };
            let mut set: BTreeSet<Coord> = BTreeSet::new();
            for &c in coords {
                // Output cells whose receptive field touches this voxel.
                for dy in -r..=r {
                    for dx in -r..=r {
                        let sx = c.ix as i64 - dx;
                        let sy = c.iy as i64 - dy;
                        if stride == 2 && (sx.rem_euclid(2) != 0 || sy.rem_euclid(2) != 0) {
                            continue;
                        }
                        let ox = sx / stride as i64;
                        let oy = sy / stride as i64;
                        if ox < 0
                            || oy < 0
                            || ox >= out_grid.extent.0 as i64
                            || oy >= out_grid.extent.1 as i64
                        {
                            continue;
                        }
                        set.insert(Coord::new(ox as u32, oy as u32));
                    }
                }
            }
            (out_grid, set.into_iter().collect())
        }
    };
    let mut src = Vec::with_capacity(out_coords.len() * taps);
    for &oc in &out_coords {
        for dy in -r..=r {
            for dx in -r..=r {
                let sx = oc.ix as i64 * stride as i64 + dx;
                let sy = oc.iy as i64 * stride as i64 + dy;
                if sx < 0 || sy < 0 || sx >= grid.extent.0 as i64 || sy >= grid.extent.1 as i64 {
                    src.push(NO_SRC);
                } else {
                    src.push(coord_lookup(coords, Coord::new(sx as u32, sy as u32)));
                }
            }
        }
    }
    NeighborPlan {
        out_grid,
        out_coords,
        taps,
        src,
    }
}

/// Expands input rows into the `(n_out) x (taps * c_in)` gather matrix of a
/// plan; absent neighbors are zero blocks.
pub fn im2col(features: &Matrix, plan: &NeighborPlan) -> Matrix {
    let c = features.cols();
    let cols = plan.taps * c;
    let mut out = Matrix::zeros(plan.out_coords.len(), cols);
    par::for_each_row_mut(out.data_mut(), cols, 16, |o, row| {
        for t in 0..plan.taps {
            if let Some(srow) = plan.src_at(o, t) {
                row[t * c..(t + 1) * c].copy_from_slice(features.row(srow));
            }
        }
    });
    out
}

fn conv_with_plan(input: &SparseTensor, kernel: &ConvKernel, plan: &NeighborPlan) -> Result<SparseTensor> {
    let gathered = im2col(input.features(), plan);
    let mut out = gathered.matmul(kernel.weights());
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            let v = out.at(i, j) + kernel.bias().at(0, j);
            out.set(i, j, v);
        }
    }
    Ok(SparseTensor {
        grid: plan.out_grid.clone(),
        coords: plan.out_coords.clone(),
        features: out,
    })
}

fn check_conv_input(input: &SparseTensor, kernel: &ConvKernel) -> Result<()> {
    if kernel.c_in() != input.channels() {
        return Err(Error::DimensionMismatch {
            context: "conv input channels",
            expected: kernel.c_in(),
            got: input.channels(),
        });
    }
    Ok(())
}

/// Convolution whose output coordinates equal the input coordinates; absent
/// neighbors contribute zero.
pub fn submanifold_conv(input: &SparseTensor, kernel: &ConvKernel) -> Result<SparseTensor> {
    if kernel.mode() != ConvMode::Submanifold {
        return Err(Error::Invalid("submanifold_conv requires a submanifold kernel".into()));
    }
    check_conv_input(input, kernel)?;
    let plan = neighbor_plan(
        input.coords(),
        input.grid(),
        kernel.size(),
        ConvMode::Submanifold,
        1,
    );
    conv_with_plan(input, kernel, &plan)
}

/// Convolution that dilates occupancy to every cell reachable by the kernel
/// footprint. With stride 2 the output grid extent halves (rounded up).
pub fn sparse_conv(input: &SparseTensor, kernel: &ConvKernel) -> Result<SparseTensor> {
    if kernel.mode() != ConvMode::Regular {
        return Err(Error::Invalid("sparse_conv requires a regular kernel".into()));
    }
    check_conv_input(input, kernel)?;
    let plan = neighbor_plan(
        input.coords(),
        input.grid(),
        kernel.size(),
        ConvMode::Regular,
        kernel.stride(),
    );
    conv_with_plan(input, kernel, &plan)
}

/// Dense `W x H x C` grid; occupied cells carry features, the rest are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl DenseGrid {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        DenseGrid {
            width,
            height,
            channels,
            data: alloc::vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, c: usize) -> f64 {
        self.data[(iy * self.width + ix) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, ix: usize, iy: usize, c: usize, v: f64) {
        self.data[(iy * self.width + ix) * self.channels + c] = v;
    }
}

/// Scatters a sparse tensor onto a dense grid.
pub fn densify(input: &SparseTensor) -> DenseGrid {
    let (w, h) = (input.grid().extent.0 as usize, input.grid().extent.1 as usize);
    let mut dense = DenseGrid::zeros(w, h, input.channels());
    for (row, &c) in input.coords().iter().enumerate() {
        for ch in 0..input.channels() {
            dense.set(c.ix as usize, c.iy as usize, ch, input.features().at(row, ch));
        }
    }
    dense
}

/// Collects cells with any nonzero channel back into a sparse tensor.
pub fn sparsify(dense: &DenseGrid, grid: &GridSpec) -> Result<SparseTensor> {
    let mut coords = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for iy in 0..dense.height {
        for ix in 0..dense.width {
            let any = (0..dense.channels).any(|c| dense.at(ix, iy, c) != 0.0);
            if any {
                coords.push(Coord::new(ix as u32, iy as u32));
                for c in 0..dense.channels {
                    rows.push(dense.at(ix, iy, c));
                }
            }
        }
    }
    let n = coords.len();
    SparseTensor::new(grid.clone(), coords, Matrix::from_vec(n, dense.channels, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid8() -> GridSpec {
        GridSpec::new((0.0, 0.0), (1.0, 1.0), (8, 8), 1).unwrap()
    }

    #[test]
    fn grid_rejects_bad_specs() {
        assert!(GridSpec::new((0.0, 0.0), (0.0, 1.0), (8, 8), 1).is_err());
        assert!(GridSpec::new((0.0, 0.0), (1.0, 1.0), (0, 8), 1).is_err());
        assert!(GridSpec::new((0.0, 0.0), (1.0, 1.0), (8, 8), 3).is_err());
    }

    #[test]
    fn voxelize_point_at_cell_center_has_zero_offsets() {
        let grid = grid8();
        let pts = [Point::new(2.5, 3.5, 1.25, 0.5)];
        let t = voxelize(&pts, &grid, &LinearMap::identity(4)).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.coords()[0], Coord::new(2, 3));
        let f = t.features().row(0);
        assert!(f[0].abs() < 1e-12 && f[1].abs() < 1e-12);
        assert_eq!(f[2], 1.25);
        assert_eq!(f[3], 0.5);
    }

    #[test]
    fn voxelize_symmetric_pair_averages() {
        let grid = grid8();
        let pts = [
            Point::new(2.2, 3.8, 1.0, 0.2),
            Point::new(2.8, 3.2, 3.0, 0.8),
        ];
        let t = voxelize(&pts, &grid, &LinearMap::identity(4)).unwrap();
        assert_eq!(t.len(), 1);
        let f = t.features().row(0);
        assert!(f[0].abs() < 1e-12 && f[1].abs() < 1e-12);
        assert!((f[2] - 2.0).abs() < 1e-12);
        assert!((f[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn voxelize_rejects_all_outside() {
        let grid = grid8();
        let pts = [Point::new(-1.0, 0.5, 0.0, 0.0)];
        assert!(matches!(
            voxelize(&pts, &grid, &LinearMap::identity(4)),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn voxelize_counts_dropped_points() {
        let grid = grid8();
        let pts = [
            Point::new(0.5, 0.5, 0.0, 0.1),
            Point::new(9.5, 0.5, 0.0, 0.1),
            Point::new(-3.0, 2.0, 0.0, 0.1),
        ];
        let (_, stats) = voxelize_raw(&pts, &grid).unwrap();
        assert_eq!(stats.dropped_points, 2);
    }

    fn identity_kernel(c: usize, mode: ConvMode) -> ConvKernel {
        // k=1 kernel with identity weights.
        ConvKernel::new(1, c, c, Matrix::eye(c, c), Matrix::zeros(1, c), mode, 1).unwrap()
    }

    fn tensor_from(coords: &[(u32, u32)], grid: &GridSpec, c: usize) -> SparseTensor {
        let n = coords.len();
        let feat = Matrix::from_fn(n, c, |i, j| (i * c + j) as f64 * 0.37 + 1.0);
        SparseTensor::new(
            grid.clone(),
            coords.iter().map(|&(x, y)| Coord::new(x, y)).collect(),
            feat,
        )
        .unwrap()
    }

    #[test]
    fn submanifold_identity_kernel_is_identity() {
        let grid = grid8();
        let t = tensor_from(&[(1, 1), (3, 4), (7, 0)], &grid, 3);
        let out = submanifold_conv(&t, &identity_kernel(3, ConvMode::Submanifold)).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn submanifold_zero_kernel_yields_bias() {
        let grid = grid8();
        let t = tensor_from(&[(1, 1), (3, 4)], &grid, 2);
        let k = ConvKernel::new(
            3,
            2,
            2,
            Matrix::zeros(18, 2),
            Matrix::from_vec(1, 2, alloc::vec![0.5, -1.5]),
            ConvMode::Submanifold,
            1,
        )
        .unwrap();
        let out = submanifold_conv(&t, &k).unwrap();
        for i in 0..out.len() {
            assert_eq!(out.features().row(i), &[0.5, -1.5]);
        }
    }

    #[test]
    fn sparse_conv_single_interior_voxel_dilates_to_nine() {
        let grid = grid8();
        let t = tensor_from(&[(3, 3)], &grid, 2);
        let k = ConvKernel::new(
            3,
            2,
            2,
            Matrix::from_fn(18, 2, |i, j| ((i + j) % 5) as f64 * 0.2),
            Matrix::zeros(1, 2),
            ConvMode::Regular,
            1,
        )
        .unwrap();
        let out = sparse_conv(&t, &k).unwrap();
        assert_eq!(out.len(), 9);
        for &c in out.coords() {
            assert!(c.ix >= 2 && c.ix <= 4 && c.iy >= 2 && c.iy <= 4);
        }
    }

    #[test]
    fn sparse_conv_corner_voxel_clips_to_four() {
        let grid = grid8();
        let t = tensor_from(&[(0, 0)], &grid, 1);
        let k = ConvKernel::new(
            3,
            1,
            1,
            Matrix::filled(9, 1, 1.0),
            Matrix::zeros(1, 1),
            ConvMode::Regular,
            1,
        )
        .unwrap();
        let out = sparse_conv(&t, &k).unwrap();
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn sparse_conv_stride_two_halves_extent() {
        let grid = grid8();
        let t = tensor_from(&[(3, 3), (4, 4)], &grid, 1);
        let k = ConvKernel::new(
            3,
            1,
            1,
            Matrix::filled(9, 1, 1.0),
            Matrix::zeros(1, 1),
            ConvMode::Regular,
            2,
        )
        .unwrap();
        let out = sparse_conv(&t, &k).unwrap();
        assert_eq!(out.grid().extent, (4, 4));
        assert_eq!(out.grid().stride, 2);
        assert_eq!(out.grid().voxel_size, (2.0, 2.0));
    }

    #[test]
    fn densify_roundtrip() {
        let grid = grid8();
        let t = tensor_from(&[(0, 7), (5, 2), (2, 2)], &grid, 3);
        let back = sparsify(&densify(&t), &grid).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn densify_empty_is_all_zero() {
        let grid = grid8();
        let t = SparseTensor::empty(grid, 2);
        let d = densify(&t);
        assert!(d.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn new_canonicalizes_row_order() {
        let grid = grid8();
        let coords = alloc::vec![Coord::new(5, 5), Coord::new(1, 1), Coord::new(3, 1)];
        let feat = Matrix::from_fn(3, 1, |i, _| i as f64);
        let t = SparseTensor::new(grid, coords, feat).unwrap();
        assert_eq!(
            t.coords(),
            &[Coord::new(1, 1), Coord::new(3, 1), Coord::new(5, 5)]
        );
        assert_eq!(t.features().data(), &[1.0, 2.0, 0.0]);
    }

    #[test]
    fn new_rejects_duplicates() {
        let grid = grid8();
        let coords = alloc::vec![Coord::new(5, 5), Coord::new(5, 5)];
        let feat = Matrix::zeros(2, 1);
        assert!(SparseTensor::new(grid, coords, feat).is_err());
    }
}
