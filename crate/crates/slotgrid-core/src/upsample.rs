//! Sparse upsampling to the next finer grid level.
//!
//! Two strategies:
//! - `SpSu`: each coarse voxel keeps its feature at the doubled coordinate
//!   (the lower-left fine cell of its 2x2 block), then a regular 3x3 sparse
//!   convolution diffuses into the neighborhood.
//! - `SmSu`: each coarse voxel's feature is repeated into all four fine cells
//!   of its block, then a submanifold 3x3 convolution mixes them in place.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::sparse::{
    sparse_conv, submanifold_conv, ConvKernel, ConvMode, Coord, SparseTensor,
};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleStrategy {
    SpSu,
    SmSu,
}

#[derive(Debug, Clone)]
pub struct UpsampleConfig {
    pub strategy: UpsampleStrategy,
    pub kernel: ConvKernel,
}

impl UpsampleConfig {
    pub fn new(strategy: UpsampleStrategy, kernel: ConvKernel) -> Result<Self> {
        if kernel.size() != 3 || kernel.stride() != 1 {
            return Err(Error::Invalid(
                "upsample kernels must have size 3 and stride 1".into(),
            ));
        }
        let expected_mode = match strategy {
            UpsampleStrategy::SpSu => ConvMode::Regular,
            UpsampleStrategy::SmSu => ConvMode::Submanifold,
        };
        if kernel.mode() != expected_mode {
            return Err(Error::Invalid(
                "upsample kernel mode does not match the strategy".into(),
            ));
        }
        Ok(UpsampleConfig { strategy, kernel })
    }

    pub fn apply(&self, input: &SparseTensor) -> Result<SparseTensor> {
        match self.strategy {
            UpsampleStrategy::SpSu => upsample_sp(input, &self.kernel),
            UpsampleStrategy::SmSu => upsample_sm(input, &self.kernel),
        }
    }
}

/// Coordinate doubling: voxel `(x, y)` moves to `(2x, 2y)` on the grid one
/// stride level up, keeping its feature.
pub fn double_coords(input: &SparseTensor) -> Result<SparseTensor> {
    let fine = input.grid().upsampled()?;
    let coords: Vec<Coord> = input
        .coords()
        .iter()
        .map(|c| Coord::new(c.ix * 2, c.iy * 2))
        .collect();
    SparseTensor::new(fine, coords, input.features().clone())
}

/// Feature repetition: voxel `(x, y)` spawns the four fine cells of its 2x2
/// block, all carrying the coarse feature.
pub fn repeat_fine(input: &SparseTensor) -> Result<SparseTensor> {
    let fine = input.grid().upsampled()?;
    let n = input.len();
    let c = input.channels();
    let mut coords = Vec::with_capacity(4 * n);
    let mut feat = Matrix::zeros(4 * n, c);
    for (row, &coord) in input.coords().iter().enumerate() {
        for (block, (dx, dy)) in [(0, 0), (1, 0), (0, 1), (1, 1)].iter().enumerate() {
            coords.push(Coord::new(coord.ix * 2 + dx, coord.iy * 2 + dy));
            feat.row_mut(row * 4 + block)
                .copy_from_slice(input.features().row(row));
        }
    }
    SparseTensor::new(fine, coords, feat)
}

/// Scatter-then-diffuse upsampling: coordinate doubling followed by a regular
/// 3x3 stride-1 sparse convolution.
pub fn upsample_sp(input: &SparseTensor, kernel: &ConvKernel) -> Result<SparseTensor> {
    if kernel.mode() != ConvMode::Regular || kernel.size() != 3 || kernel.stride() != 1 {
        return Err(Error::Invalid(
            "upsample_sp requires a regular 3x3 stride-1 kernel".into(),
        ));
    }
    let doubled = double_coords(input)?;
    sparse_conv(&doubled, kernel)
}

/// Repeat-then-mix upsampling: feature repetition into 2x2 blocks followed by
/// a submanifold 3x3 convolution. Output voxel count is exactly `4 * N`.
pub fn upsample_sm(input: &SparseTensor, kernel: &ConvKernel) -> Result<SparseTensor> {
    if kernel.mode() != ConvMode::Submanifold || kernel.size() != 3 {
        return Err(Error::Invalid(
            "upsample_sm requires a submanifold 3x3 kernel".into(),
        ));
    }
    let repeated = repeat_fine(input)?;
    submanifold_conv(&repeated, kernel)
}
