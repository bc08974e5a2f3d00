//! Adam optimizer with bias correction.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.003,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates plus the step counter, one slot per
/// parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(params: &[Matrix]) -> Self {
        OptimizerState {
            step: 0,
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }
}

/// One Adam update over all parameter tensors, in slot order.
pub fn adam_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            context: "adam parameter slots",
            expected: params.len(),
            got: grads.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - math::powi(b1, t);
    let bc2 = 1.0 - math::powi(b2, t);
    for (slot, param) in params.iter_mut().enumerate() {
        let g = &grads[slot];
        if g.shape() != param.shape() {
            return Err(Error::DimensionMismatch {
                context: "adam gradient shape",
                expected: param.rows() * param.cols(),
                got: g.rows() * g.cols(),
            });
        }
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        for i in 0..param.rows() {
            for j in 0..param.cols() {
                let mut grad = g.at(i, j);
                if cfg.weight_decay != 0.0 {
                    grad += cfg.weight_decay * param.at(i, j);
                }
                let mi = b1 * m.at(i, j) + (1.0 - b1) * grad;
                let vi = b2 * v.at(i, j) + (1.0 - b2) * grad * grad;
                m.set(i, j, mi);
                v.set(i, j, vi);
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let update = cfg.lr * mhat / (math::sqrt(vhat) + cfg.eps);
                param.set(i, j, param.at(i, j) - update);
            }
        }
    }
    Ok(())
}
