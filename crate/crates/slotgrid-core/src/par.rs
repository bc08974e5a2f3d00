//! Thin parallelism layer.
//!
//! Every parallel loop in the crate either computes independent output slots
//! or joins per-slot results in a fixed index order, so results are
//! bit-identical whether the `parallel` feature is on and whatever the rayon
//! thread count is.

use alloc::vec::Vec;

/// Applies `f` to each row (a `cols`-wide mutable chunk of `data`) by index.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_row_mut<F>(data: &mut [f64], cols: usize, min_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    use rayon::prelude::*;
    data.par_chunks_mut(cols)
        .with_min_len(min_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_row_mut<F>(data: &mut [f64], cols: usize, _min_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    for (i, row) in data.chunks_mut(cols).enumerate() {
        f(i, row);
    }
}

/// Maps `0..n` through `f`, collecting results in index order.
#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T, F>(n: usize, min_len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().with_min_len(min_len).map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T, F>(n: usize, _min_len: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
