//! Sparse voxel-grid detection kernels with a minimal autodiff tape.
//!
//! The crate provides the computational stack of a small bird's-eye-view
//! sparse detector: point-cloud voxelization, submanifold and regular sparse
//! convolution, slot-partition linear attention, sparse upsampling, a
//! dynamic top-k label assigner with its detection losses, reverse-mode
//! differentiation of the whole graph, Adam, a synthetic scene generator,
//! and NMS/average-precision evaluation.
//!
//! Everything is deterministic: row order is canonical (ascending `iy`,
//! `ix`), reductions accumulate in fixed order, and results are bit-identical
//! across runs and thread counts. The crate is `no_std`-compatible (with
//! `alloc`); the `std` feature is on by default and `parallel` enables rayon
//! data parallelism.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod assign;
pub mod boxes;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod math;
pub mod model;
pub mod optim;
pub mod oracle;
mod par;
pub mod scene;
pub mod slot;
pub mod sparse;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod upsample;

pub use error::{Error, Result};
pub use sparse::{Coord, GridSpec, Point, SparseTensor};
pub use tensor::Matrix;
