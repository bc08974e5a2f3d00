//! Reverse-mode automatic differentiation over matrices.
//!
//! The tape is an append-only list of nodes in topological order; `backward`
//! walks it once in reverse, accumulating gradients per node. Kinked ops
//! (ReLU, min/max, atan2 near the origin, divisions near zero) use the
//! conventional subgradient and report how close the forward pass came to a
//! kink via [`Tape::min_kink_margin`], which gradient checks use to resample.
//!
//! Discrete choices (label assignment, top-k selection, gather indices) enter
//! the graph only as constants, so no gradient ever flows through them.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::sparse::NeighborPlan;
use crate::tensor::Matrix;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    /// `aᵀ · b` for same-row-count inputs.
    MatmulTn(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `a (n x c) + b (1 x c)` broadcast over rows.
    AddRowBroadcast(NodeId, NodeId),
    /// `a (n x c) / d (n x 1)` broadcast over columns.
    DivColBroadcast(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Logistic(NodeId),
    Softplus(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Atan2(NodeId, NodeId),
    Min(NodeId, NodeId),
    Max(NodeId, NodeId),
    SumAll(NodeId),
    SumRows(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ScatterRows {
        parts: Vec<(NodeId, Vec<usize>)>,
    },
    SliceCols(NodeId, usize, usize),
    Im2col(NodeId, NeighborPlan),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Gradients of a scalar loss with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, densified to zeros when the node is unreachable
    /// from the loss.
    pub fn get_or_zeros(&self, id: NodeId, shape: (usize, usize)) -> Matrix {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Matrix::zeros(shape.0, shape.1),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    min_kink_margin: f64,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            min_kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance-to-kink observed by any forward op on this tape.
    pub fn min_kink_margin(&self) -> f64 {
        self.min_kink_margin
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn note_margin(&mut self, m: f64) {
        if m < self.min_kink_margin {
            self.min_kink_margin = m;
        }
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::Matmul(a, b), v)
    }

    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_tn(self.value(b));
        self.push(Op::MatmulTn(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut margin = f64::INFINITY;
        for &d in self.value(b).data() {
            margin = margin.min(math::abs(d));
        }
        self.note_margin(margin);
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1, "row broadcast rhs must be 1 x c");
        assert_eq!(av.cols(), bv.cols(), "row broadcast width mismatch");
        let mut v = av.clone();
        for i in 0..v.rows() {
            for j in 0..v.cols() {
                let x = v.at(i, j) + self.value(b).at(0, j);
                v.set(i, j, x);
            }
        }
        self.push(Op::AddRowBroadcast(a, b), v)
    }

    // No automatic margin here: callers whose denominators are stabilized
    // (attention's `q·Σkᵀ + eps`) report their own pre-stabilizer margin via
    // `note_kink_margin`, since an exactly-zero raw denominator is a locally
    // constant, smooth point rather than a kink.
    pub fn div_col_broadcast(&mut self, a: NodeId, d: NodeId) -> NodeId {
        let (av, dv) = (self.value(a), self.value(d));
        assert_eq!(dv.cols(), 1, "column broadcast rhs must be n x 1");
        assert_eq!(av.rows(), dv.rows(), "column broadcast row mismatch");
        let mut v = av.clone();
        for i in 0..v.rows() {
            let inv = 1.0 / dv.at(i, 0);
            for j in 0..v.cols() {
                let x = v.at(i, j) * inv;
                v.set(i, j, x);
            }
        }
        self.push(Op::DivColBroadcast(a, d), v)
    }

    /// Reports an externally computed distance-to-kink for this tape.
    pub fn note_kink_margin(&mut self, margin: f64) {
        self.note_margin(margin);
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), v)
    }

    // Exactly-zero inputs are ignored by the margin: with zero-initialized
    // biases they arise from rows pinned to zero by upstream dead ReLUs,
    // which are locally constant (smooth), not kinks.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut margin = f64::INFINITY;
        for &x in self.value(a).data() {
            if x != 0.0 {
                margin = margin.min(math::abs(x));
            }
        }
        self.note_margin(margin);
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(math::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn logistic(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(math::logistic);
        self.push(Op::Logistic(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(math::softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(math::sin);
        self.push(Op::Sin(a), v)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(math::cos);
        self.push(Op::Cos(a), v)
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: NodeId, x: NodeId) -> NodeId {
        let (yv, xv) = (self.value(y), self.value(x));
        assert_eq!(yv.shape(), xv.shape(), "atan2 shape mismatch");
        let mut margin = f64::INFINITY;
        for (&a, &b) in yv.data().iter().zip(xv.data().iter()) {
            let mag = math::sqrt(a * a + b * b);
            if mag != 0.0 {
                margin = margin.min(mag);
            }
        }
        let v = yv.zip_map(xv, math::atan2);
        self.note_margin(margin);
        self.push(Op::Atan2(y, x), v)
    }

    pub fn emin(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let mut margin = f64::INFINITY;
        for (&x, &y) in av.data().iter().zip(bv.data().iter()) {
            margin = margin.min(math::abs(x - y));
        }
        let v = av.zip_map(bv, |x, y| if x <= y { x } else { y });
        self.note_margin(margin);
        self.push(Op::Min(a, b), v)
    }

    pub fn emax(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let mut margin = f64::INFINITY;
        for (&x, &y) in av.data().iter().zip(bv.data().iter()) {
            margin = margin.min(math::abs(x - y));
        }
        let v = av.zip_map(bv, |x, y| if x >= y { x } else { y });
        self.note_margin(margin);
        self.push(Op::Max(a, b), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    /// Column sums: `n x c -> 1 x c`, accumulated in row order.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut v = Matrix::zeros(1, av.cols());
        for i in 0..av.rows() {
            for j in 0..av.cols() {
                let x = v.at(0, j) + av.at(i, j);
                v.set(0, j, x);
            }
        }
        self.push(Op::SumRows(a), v)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let av = self.value(a);
        let mut v = Matrix::zeros(indices.len(), av.cols());
        for (r, &i) in indices.iter().enumerate() {
            v.row_mut(r).copy_from_slice(self.value(a).row(i));
        }
        self.push(Op::GatherRows(a, indices), v)
    }

    /// Assembles output rows from parts; the per-part index lists must be
    /// disjoint and cover every output row exactly once.
    pub fn scatter_rows(&mut self, parts: Vec<(NodeId, Vec<usize>)>, rows: usize) -> NodeId {
        assert!(!parts.is_empty(), "scatter_rows needs at least one part");
        let cols = self.value(parts[0].0).cols();
        let mut v = Matrix::zeros(rows, cols);
        let mut filled = vec![false; rows];
        for (node, indices) in &parts {
            let pv = self.value(*node);
            assert_eq!(pv.rows(), indices.len(), "scatter part row mismatch");
            for (r, &dst) in indices.iter().enumerate() {
                assert!(!filled[dst], "scatter_rows: duplicate destination row");
                filled[dst] = true;
                v.row_mut(dst).copy_from_slice(self.value(*node).row(r));
            }
        }
        assert!(filled.iter().all(|&f| f), "scatter_rows: uncovered row");
        self.push(Op::ScatterRows { parts }, v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let av = self.value(a);
        assert!(start < end && end <= av.cols(), "slice_cols out of range");
        let mut v = Matrix::zeros(av.rows(), end - start);
        for i in 0..av.rows() {
            v.row_mut(i).copy_from_slice(&self.value(a).row(i)[start..end]);
        }
        self.push(Op::SliceCols(a, start, end), v)
    }

    /// Neighborhood gather for sparse convolution (see [`crate::sparse::im2col`]).
    pub fn im2col(&mut self, a: NodeId, plan: NeighborPlan) -> NodeId {
        let v = crate::sparse::im2col(self.value(a), &plan);
        self.push(Op::Im2col(a, plan), v)
    }

    /// Per-row layer normalization over channels with affine parameters.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        assert_eq!(self.value(gamma).shape(), (1, c), "layer_norm gamma shape");
        assert_eq!(self.value(beta).shape(), (1, c), "layer_norm beta shape");
        let mut mean = Vec::with_capacity(n);
        let mut rstd = Vec::with_capacity(n);
        let mut margin = f64::INFINITY;
        for i in 0..n {
            let row = xv.row(i);
            let mut m = 0.0;
            for &a in row {
                m += a;
            }
            m /= c as f64;
            let mut var = 0.0;
            for &a in row {
                var += (a - m) * (a - m);
            }
            var /= c as f64;
            // Zero variance means a row pinned constant by dead upstream
            // units; only small nonzero variances sit in the steep region.
            if var != 0.0 {
                margin = margin.min(math::sqrt(var));
            }
            mean.push(m);
            rstd.push(1.0 / math::sqrt(var + eps));
        }
        self.note_margin(margin);
        let mut v = Matrix::zeros(n, c);
        for i in 0..n {
            for j in 0..c {
                let xhat = (self.value(x).at(i, j) - mean[i]) * rstd[i];
                let y = xhat * self.value(gamma).at(0, j) + self.value(beta).at(0, j);
                v.set(i, j, y);
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            v,
        )
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Invalid(alloc::format!(
                "backward requires a scalar loss node, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Matrix::scalar(1.0));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, id: NodeId, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                add_grad(grads, *a, g.matmul_nt(self.value(*b)));
                add_grad(grads, *b, self.value(*a).matmul_tn(g));
            }
            Op::MatmulTn(a, b) => {
                add_grad(grads, *a, self.value(*b).matmul_nt(g));
                add_grad(grads, *b, self.value(*a).matmul(g));
            }
            Op::Transpose(a) => add_grad(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                add_grad(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                add_grad(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                add_grad(grads, *a, g.zip_map(bv, |gv, d| gv / d));
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                for i in 0..bv.rows() {
                    for j in 0..bv.cols() {
                        gb.set(i, j, -g.at(i, j) * out.at(i, j) / bv.at(i, j));
                    }
                }
                add_grad(grads, *b, gb);
            }
            Op::AddRowBroadcast(a, b) => {
                add_grad(grads, *a, g.clone());
                let mut gb = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        let v = gb.at(0, j) + g.at(i, j);
                        gb.set(0, j, v);
                    }
                }
                add_grad(grads, *b, gb);
            }
            Op::DivColBroadcast(a, d) => {
                let dv = self.value(*d);
                let mut ga = g.clone();
                let mut gd = Matrix::zeros(dv.rows(), 1);
                for i in 0..g.rows() {
                    let inv = 1.0 / dv.at(i, 0);
                    let mut acc = 0.0;
                    for j in 0..g.cols() {
                        ga.set(i, j, g.at(i, j) * inv);
                        acc += g.at(i, j) * out.at(i, j);
                    }
                    gd.set(i, 0, -acc * inv);
                }
                add_grad(grads, *a, ga);
                add_grad(grads, *d, gd);
            }
            Op::Scale(a, s) => add_grad(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => add_grad(grads, *a, g.clone()),
            Op::Relu(a) => {
                add_grad(
                    grads,
                    *a,
                    g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
                );
            }
            Op::Exp(a) => add_grad(grads, *a, g.zip_map(out, |gv, o| gv * o)),
            Op::Logistic(a) => {
                add_grad(grads, *a, g.zip_map(out, |gv, s| gv * s * (1.0 - s)));
            }
            Op::Softplus(a) => {
                add_grad(
                    grads,
                    *a,
                    g.zip_map(self.value(*a), |gv, x| gv * math::logistic(x)),
                );
            }
            Op::Sin(a) => {
                add_grad(grads, *a, g.zip_map(self.value(*a), |gv, x| gv * math::cos(x)));
            }
            Op::Cos(a) => {
                add_grad(grads, *a, g.zip_map(self.value(*a), |gv, x| -gv * math::sin(x)));
            }
            Op::Atan2(y, x) => {
                let (yv, xv) = (self.value(*y), self.value(*x));
                let mut gy = Matrix::zeros(yv.rows(), yv.cols());
                let mut gx = Matrix::zeros(yv.rows(), yv.cols());
                for i in 0..yv.rows() {
                    for j in 0..yv.cols() {
                        let (a, b) = (yv.at(i, j), xv.at(i, j));
                        let denom = a * a + b * b;
                        if denom > 0.0 {
                            gy.set(i, j, g.at(i, j) * b / denom);
                            gx.set(i, j, -g.at(i, j) * a / denom);
                        }
                    }
                }
                add_grad(grads, *y, gy);
                add_grad(grads, *x, gx);
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gb = Matrix::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    for j in 0..av.cols() {
                        if av.at(i, j) <= bv.at(i, j) {
                            ga.set(i, j, g.at(i, j));
                        } else {
                            gb.set(i, j, g.at(i, j));
                        }
                    }
                }
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::Max(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gb = Matrix::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    for j in 0..av.cols() {
                        if av.at(i, j) >= bv.at(i, j) {
                            ga.set(i, j, g.at(i, j));
                        } else {
                            gb.set(i, j, g.at(i, j));
                        }
                    }
                }
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                add_grad(grads, *a, Matrix::filled(av.rows(), av.cols(), g.at(0, 0)));
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    ga.row_mut(i).copy_from_slice(g.row(0));
                }
                add_grad(grads, *a, ga);
            }
            Op::GatherRows(a, indices) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..av.cols() {
                        let v = ga.at(i, j) + g.at(r, j);
                        ga.set(i, j, v);
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::ScatterRows { parts } => {
                for (node, indices) in parts {
                    let pv = self.value(*node);
                    let mut gp = Matrix::zeros(pv.rows(), pv.cols());
                    for (r, &dst) in indices.iter().enumerate() {
                        gp.row_mut(r).copy_from_slice(g.row(dst));
                    }
                    add_grad(grads, *node, gp);
                }
            }
            Op::SliceCols(a, start, _end) => {
                let av = self.value(*a);
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga.set(i, start + j, g.at(i, j));
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::Im2col(a, plan) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                for o in 0..plan.out_coords.len() {
                    for t in 0..plan.taps {
                        if let Some(srow) = plan.src_at(o, t) {
                            let grow = &g.row(o)[t * c..(t + 1) * c];
                            let target = ga.row_mut(srow);
                            for (tv, &gv) in target.iter_mut().zip(grow.iter()) {
                                *tv += gv;
                            }
                        }
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gammav = self.value(*gamma);
                let (n, c) = xv.shape();
                let mut gx = Matrix::zeros(n, c);
                let mut ggamma = Matrix::zeros(1, c);
                let mut gbeta = Matrix::zeros(1, c);
                for i in 0..n {
                    let r = rstd[i];
                    let m = mean[i];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        let xhat = (xv.at(i, j) - m) * r;
                        let dxhat = g.at(i, j) * gammav.at(0, j);
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                        ggamma.set(0, j, ggamma.at(0, j) + g.at(i, j) * xhat);
                        gbeta.set(0, j, gbeta.at(0, j) + g.at(i, j));
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        let xhat = (xv.at(i, j) - m) * r;
                        let dxhat = g.at(i, j) * gammav.at(0, j);
                        gx.set(i, j, r * (dxhat - m1 - xhat * m2));
                    }
                }
                add_grad(grads, *x, gx);
                add_grad(grads, *gamma, ggamma);
                add_grad(grads, *beta, gbeta);
            }
        }
    }
}

fn add_grad(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
    match &mut grads[id] {
        Some(existing) => existing.add_scaled_assign(&delta, 1.0),
        slot @ None => *slot = Some(delta),
    }
}

/// Convolution built from tape primitives: im2col gather, weight matmul, and
/// a broadcast bias add. Shares plan semantics with the non-traced conv ops.
pub fn conv_node(
    tape: &mut Tape,
    x: NodeId,
    weights: NodeId,
    bias: NodeId,
    plan: &NeighborPlan,
) -> NodeId {
    let gathered = tape.im2col(x, plan.clone());
    let prod = tape.matmul(gathered, weights);
    tape.add_row_broadcast(prod, bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        // Deterministic pseudo-random values kept away from kinks.
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        Matrix::from_fn(rows, cols, |_, _| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let u = ((state >> 11) as f64) / (1u64 << 53) as f64;
            if u > 0.5 {
                (u - 0.5) * 2.0 + 0.3
            } else {
                (u - 0.5) * 2.0 - 0.3
            }
        })
    }

    /// Checks analytic gradients of `build` against central differences on
    /// every entry of every input.
    fn check_graph(build: impl Fn(&mut Tape, &[NodeId]) -> NodeId, inputs: &[Matrix], tol: f64) {
        let eval = |ins: &[Matrix]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = ins.iter().map(|m| tape.leaf(m.clone())).collect();
            let out = build(&mut tape, &ids);
            tape.value(out).at(0, 0)
        };
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-6;
        for (w, m) in inputs.iter().enumerate() {
            let g = grads.get_or_zeros(ids[w], m.shape());
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    let mut plus = inputs.to_vec();
                    plus[w].set(i, j, m.at(i, j) + h);
                    let mut minus = inputs.to_vec();
                    minus[w].set(i, j, m.at(i, j) - h);
                    let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let ana = g.at(i, j);
                    let denom = num.abs().max(ana.abs()).max(1.0);
                    assert!(
                        (num - ana).abs() / denom < tol,
                        "input {w} entry ({i},{j}): fd {num} vs analytic {ana}"
                    );
                }
            }
        }
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(rng_matrix(3, 4, 7));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Matrix::filled(3, 4, 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(rng_matrix(2, 2, 1));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn matmul_grad_matches_fd() {
        let inputs = [rng_matrix(3, 4, 1), rng_matrix(4, 2, 2), rng_matrix(3, 2, 3)];
        check_graph(
            |tape, ids| {
                let p = tape.matmul(ids[0], ids[1]);
                let weighted = tape.mul(p, ids[2]);
                tape.sum_all(weighted)
            },
            &inputs,
            1e-6,
        );
    }

    #[test]
    fn matmul_tn_and_transpose_grads_match_fd() {
        let inputs = [rng_matrix(4, 3, 4), rng_matrix(4, 2, 5)];
        check_graph(
            |tape, ids| {
                let p = tape.matmul_tn(ids[0], ids[1]);
                let t = tape.transpose(p);
                tape.sum_all(t)
            },
            &inputs,
            1e-6,
        );
    }

    #[test]
    fn elementwise_grads_match_fd() {
        let inputs = [rng_matrix(3, 3, 6), rng_matrix(3, 3, 7)];
        check_graph(
            |tape, ids| {
                let s = tape.sub(ids[0], ids[1]);
                let m = tape.mul(s, ids[0]);
                let d = tape.div(m, ids[1]);
                let l = tape.logistic(d);
                let sp = tape.softplus(l);
                let e = tape.exp(sp);
                tape.sum_all(e)
            },
            &inputs,
            1e-5,
        );
    }

    #[test]
    fn trig_and_atan2_grads_match_fd() {
        let inputs = [rng_matrix(2, 3, 8), rng_matrix(2, 3, 9)];
        check_graph(
            |tape, ids| {
                let s = tape.sin(ids[0]);
                let c = tape.cos(ids[1]);
                let a = tape.atan2(s, c);
                tape.sum_all(a)
            },
            &inputs,
            1e-6,
        );
    }

    #[test]
    fn min_max_relu_grads_match_fd() {
        let inputs = [rng_matrix(3, 3, 10), rng_matrix(3, 3, 11)];
        check_graph(
            |tape, ids| {
                let mn = tape.emin(ids[0], ids[1]);
                let mx = tape.emax(ids[0], ids[1]);
                let r = tape.relu(mn);
                let s = tape.add(r, mx);
                tape.sum_all(s)
            },
            &inputs,
            1e-6,
        );
    }

    #[test]
    fn broadcast_grads_match_fd() {
        let inputs = [
            rng_matrix(4, 3, 12),
            rng_matrix(1, 3, 13),
            rng_matrix(4, 1, 14),
        ];
        check_graph(
            |tape, ids| {
                let a = tape.add_row_broadcast(ids[0], ids[1]);
                let d = tape.div_col_broadcast(a, ids[2]);
                tape.sum_all(d)
            },
            &inputs,
            1e-5,
        );
    }

    #[test]
    fn gather_scatter_slice_grads_match_fd() {
        let inputs = [rng_matrix(5, 4, 15)];
        check_graph(
            |tape, ids| {
                let g1 = tape.gather_rows(ids[0], alloc::vec![4, 0, 2]);
                let g2 = tape.gather_rows(ids[0], alloc::vec![1, 3]);
                let s = tape.scatter_rows(
                    alloc::vec![(g1, alloc::vec![0, 1, 2]), (g2, alloc::vec![3, 4])],
                    5,
                );
                let sl = tape.slice_cols(s, 1, 3);
                tape.sum_all(sl)
            },
            &inputs,
            1e-6,
        );
    }

    #[test]
    fn layer_norm_grads_match_fd() {
        let inputs = [
            rng_matrix(4, 6, 16),
            rng_matrix(1, 6, 17),
            rng_matrix(1, 6, 18),
        ];
        check_graph(
            |tape, ids| {
                let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-6);
                let sq = tape.mul(y, y);
                tape.sum_all(sq)
            },
            &inputs,
            1e-5,
        );
    }

    #[test]
    fn sum_rows_grads_match_fd() {
        let inputs = [rng_matrix(4, 3, 19), rng_matrix(1, 3, 20)];
        check_graph(
            |tape, ids| {
                let s = tape.sum_rows(ids[0]);
                let m = tape.mul(s, ids[1]);
                tape.sum_all(m)
            },
            &inputs,
            1e-6,
        );
    }

    #[test]
    fn relu_kink_margin_is_tracked() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(1, 3, alloc::vec![1.0, -2.0, 1e-5]));
        let _ = tape.relu(x);
        assert!((tape.min_kink_margin() - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn gather_duplicate_indices_accumulate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_vec(2, 1, alloc::vec![3.0, 4.0]));
        let g = tape.gather_rows(x, alloc::vec![0, 0, 1]);
        let loss = tape.sum_all(g);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 1.0]);
    }
}
