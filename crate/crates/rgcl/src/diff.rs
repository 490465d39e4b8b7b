//! Minimal reverse-mode gradient accumulation over the fixed operator
//! set this model needs, plus a finite-difference checker.
//!
//! Each primitive op has a closed-form adjoint; there is no general
//! tensor engine. A [`Tape`] records the forward pass as a flat list of
//! nodes, each holding its output value; [`Tape::backward`] walks the
//! list in reverse and accumulates adjoints into every node, returning
//! the gradients of requested leaves.
//!
//! The contrastive term is a single fused op: its forward pass keeps
//! only the per-row log-normalizers and its backward pass recomputes the
//! similarity blocks, so no batch-by-batch similarity matrix is ever
//! retained on the tape.

use rayon::prelude::*;

use crate::graph::{propagate, NormalizedAdjacency};
use crate::linalg::{dot, gemm_nn, gemm_nt_block, gemm_tn, Mat, ROW_BLOCK};

pub type ValueId = usize;

/// Norm floor guarding cosine similarity against zero vectors.
pub const NORM_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    Propagate {
        input: ValueId,
    },
    /// Elementwise mean of same-shape inputs.
    MeanRows {
        inputs: Vec<ValueId>,
    },
    Gather {
        input: ValueId,
        rows: Vec<usize>,
    },
    /// Input plus a constant per-row offset (adjoint is the identity).
    OffsetRows {
        input: ValueId,
    },
    Scale {
        input: ValueId,
        factor: f64,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    /// Row-wise L2 normalization with the `NORM_FLOOR` guard.
    NormalizeRows {
        input: ValueId,
        inv_norms: Vec<f64>,
    },
    /// Per-row inner products; output is n x 1.
    RowDot {
        a: ValueId,
        b: ValueId,
    },
    /// Fused in-batch contrastive loss over pre-normalized views:
    /// sum_u [ logsumexp_v(<x_u, y_v>/tau) - <x_u, y_u>/tau ].
    InfoNce {
        x: ValueId,
        y: ValueId,
        inv_tau: f64,
        row_logz: Vec<f64>,
    },
    /// -sum_i ln(sigmoid(v_i)), computed through softplus.
    NegSumLogSigmoid {
        input: ValueId,
    },
    /// Sum of all entries.
    SumElements {
        input: ValueId,
    },
    /// Weighted sum of scalar nodes.
    WeightedSum {
        terms: Vec<(ValueId, f64)>,
    },
}

struct Node {
    op: Op,
    value: Mat,
}

pub struct Tape<'a> {
    adj: Option<&'a NormalizedAdjacency>,
    nodes: Vec<Node>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            adj: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_adjacency(adj: &'a NormalizedAdjacency) -> Self {
        Tape {
            adj: Some(adj),
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: ValueId) -> &Mat {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat) -> ValueId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Mat) -> ValueId {
        self.push(Op::Leaf, value)
    }

    pub fn propagate(&mut self, input: ValueId) -> ValueId {
        let adj = self.adj.expect("tape has no adjacency attached");
        let value = propagate(adj, self.value(input));
        self.push(Op::Propagate { input }, value)
    }

    pub fn mean_rows(&mut self, inputs: Vec<ValueId>) -> ValueId {
        assert!(!inputs.is_empty());
        let first = self.value(inputs[0]);
        let (r, c) = (first.rows(), first.cols());
        let mut acc = first.clone();
        for &id in &inputs[1..] {
            assert_eq!(self.value(id).rows(), r);
            assert_eq!(self.value(id).cols(), c);
            acc.add_assign(self.value(id));
        }
        acc.scale_in_place(1.0 / inputs.len() as f64);
        self.push(Op::MeanRows { inputs }, acc)
    }

    pub fn gather(&mut self, input: ValueId, rows: Vec<usize>) -> ValueId {
        let value = self.value(input).gather_rows(&rows);
        self.push(Op::Gather { input, rows }, value)
    }

    pub fn offset_rows(&mut self, input: ValueId, offsets: &Mat) -> ValueId {
        let mut value = self.value(input).clone();
        value.add_assign(offsets);
        self.push(Op::OffsetRows { input }, value)
    }

    pub fn scale(&mut self, input: ValueId, factor: f64) -> ValueId {
        let mut value = self.value(input).clone();
        value.scale_in_place(factor);
        self.push(Op::Scale { input, factor }, value)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let mut value = self.value(a).clone();
        let vb = self.value(b);
        assert_eq!(value.rows(), vb.rows());
        assert_eq!(value.cols(), vb.cols());
        for (x, y) in value.data_mut().iter_mut().zip(vb.data().iter()) {
            *x -= *y;
        }
        self.push(Op::Sub { a, b }, value)
    }

    pub fn normalize_rows(&mut self, input: ValueId) -> ValueId {
        let src = self.value(input);
        let mut value = src.clone();
        let mut inv_norms = Vec::with_capacity(src.rows());
        for r in 0..value.rows() {
            let norm = crate::linalg::l2_norm(value.row(r)).max(NORM_FLOOR);
            let inv = 1.0 / norm;
            for v in value.row_mut(r) {
                *v *= inv;
            }
            inv_norms.push(inv);
        }
        self.push(Op::NormalizeRows { input, inv_norms }, value)
    }

    pub fn row_dot(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows());
        assert_eq!(va.cols(), vb.cols());
        let data: Vec<f64> = (0..va.rows()).map(|r| dot(va.row(r), vb.row(r))).collect();
        let value = Mat::from_vec(data.len(), 1, data);
        self.push(Op::RowDot { a, b }, value)
    }

    /// In-batch contrastive loss. `x` and `y` must already be
    /// row-normalized views of the same node set, one row per node; the
    /// denominator runs over every row of `y` (including the matching
    /// one).
    pub fn infonce(&mut self, x: ValueId, y: ValueId, tau: f64) -> ValueId {
        assert!(tau > 0.0, "temperature must be positive");
        let (vx, vy) = (self.value(x), self.value(y));
        assert_eq!(vx.rows(), vy.rows(), "views must pair row for row");
        assert_eq!(vx.cols(), vy.cols());
        assert!(vx.rows() > 0, "contrastive batch is empty");
        let inv_tau = 1.0 / tau;
        let (loss, row_logz) = infonce_forward(vx, vy, inv_tau);
        self.push(
            Op::InfoNce {
                x,
                y,
                inv_tau,
                row_logz,
            },
            Mat::scalar(loss),
        )
    }

    pub fn neg_sum_log_sigmoid(&mut self, input: ValueId) -> ValueId {
        let v = self.value(input);
        let loss: f64 = v.data().iter().map(|&x| softplus(-x)).sum();
        self.push(Op::NegSumLogSigmoid { input }, Mat::scalar(loss))
    }

    pub fn sum_elements(&mut self, input: ValueId) -> ValueId {
        let total: f64 = self.value(input).data().iter().sum();
        self.push(Op::SumElements { input }, Mat::scalar(total))
    }

    pub fn weighted_sum(&mut self, terms: Vec<(ValueId, f64)>) -> ValueId {
        let mut total = 0.0;
        for &(id, w) in &terms {
            total += w * self.value(id).as_scalar();
        }
        self.push(Op::WeightedSum { terms }, Mat::scalar(total))
    }

    /// Reverse pass from a scalar output, seeding with 1.
    pub fn backward(&self, output: ValueId) -> Gradients {
        let out = self.value(output);
        assert!(
            out.rows() == 1 && out.cols() == 1,
            "default backward needs a scalar output; use backward_seeded"
        );
        self.backward_seeded(output, Mat::scalar(1.0))
    }

    /// Reverse pass with an explicit seed of the output's shape.
    pub fn backward_seeded(&self, output: ValueId, seed: Mat) -> Gradients {
        let out = self.value(output);
        assert_eq!(seed.rows(), out.rows(), "seed shape mismatch");
        assert_eq!(seed.cols(), out.cols(), "seed shape mismatch");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(seed);
        for id in (0..=output).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.apply_adjoint(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Gradients { grads }
    }

    fn apply_adjoint(&self, id: ValueId, gout: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Propagate { input } => {
                // the adjacency is symmetric, so the adjoint reuses the
                // forward kernel
                let adj = self.adj.expect("tape has no adjacency attached");
                let gin = propagate(adj, gout);
                accumulate(grads, *input, gin);
            }
            Op::MeanRows { inputs } => {
                let mut share = gout.clone();
                share.scale_in_place(1.0 / inputs.len() as f64);
                for &input in inputs {
                    accumulate(grads, input, share.clone());
                }
            }
            Op::Gather { input, rows } => {
                let src = self.value(*input);
                let mut gin = Mat::zeros(src.rows(), src.cols());
                for (dst, &src_row) in rows.iter().enumerate() {
                    crate::linalg::axpy(gin.row_mut(src_row), 1.0, gout.row(dst));
                }
                accumulate(grads, *input, gin);
            }
            Op::OffsetRows { input } => {
                accumulate(grads, *input, gout.clone());
            }
            Op::Scale { input, factor } => {
                let mut gin = gout.clone();
                gin.scale_in_place(*factor);
                accumulate(grads, *input, gin);
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, gout.clone());
                let mut gb = gout.clone();
                gb.scale_in_place(-1.0);
                accumulate(grads, *b, gb);
            }
            Op::NormalizeRows { input, inv_norms } => {
                let normalized = &node.value;
                let mut gin = Mat::zeros(gout.rows(), gout.cols());
                for r in 0..gout.rows() {
                    let y = normalized.row(r);
                    let g = gout.row(r);
                    let gy = dot(g, y);
                    let inv = inv_norms[r];
                    for (o, (gj, yj)) in gin.row_mut(r).iter_mut().zip(g.iter().zip(y.iter())) {
                        *o = inv * (gj - gy * yj);
                    }
                }
                accumulate(grads, *input, gin);
            }
            Op::RowDot { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = Mat::zeros(va.rows(), va.cols());
                let mut gb = Mat::zeros(vb.rows(), vb.cols());
                for r in 0..va.rows() {
                    let g = gout.get(r, 0);
                    crate::linalg::axpy(ga.row_mut(r), g, vb.row(r));
                    crate::linalg::axpy(gb.row_mut(r), g, va.row(r));
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::InfoNce {
                x,
                y,
                inv_tau,
                row_logz,
            } => {
                let upstream = gout.as_scalar();
                let (gx, gy) =
                    infonce_backward(self.value(*x), self.value(*y), *inv_tau, row_logz, upstream);
                accumulate(grads, *x, gx);
                accumulate(grads, *y, gy);
            }
            Op::NegSumLogSigmoid { input } => {
                let upstream = gout.as_scalar();
                let v = self.value(*input);
                let mut gin = Mat::zeros(v.rows(), v.cols());
                for (g, &xv) in gin.data_mut().iter_mut().zip(v.data().iter()) {
                    *g = upstream * (sigmoid(xv) - 1.0);
                }
                accumulate(grads, *input, gin);
            }
            Op::SumElements { input } => {
                let upstream = gout.as_scalar();
                let v = self.value(*input);
                let mut gin = Mat::zeros(v.rows(), v.cols());
                gin.data_mut().fill(upstream);
                accumulate(grads, *input, gin);
            }
            Op::WeightedSum { terms } => {
                let upstream = gout.as_scalar();
                for &(id, w) in terms {
                    accumulate(grads, id, Mat::scalar(upstream * w));
                }
            }
        }
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient accumulated at `id`, or `None` if the node never
    /// received one.
    pub fn wrt(&self, id: ValueId) -> Option<&Mat> {
        self.grads
            .get(id)
            .expect("gradient requested for an unrecorded node")
            .as_ref()
    }

    pub fn take(&mut self, id: ValueId) -> Option<Mat> {
        self.grads
            .get_mut(id)
            .expect("gradient requested for an unrecorded node")
            .take()
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: ValueId, g: Mat) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn infonce_forward(x: &Mat, y: &Mat, inv_tau: f64) -> (f64, Vec<f64>) {
    let n = x.rows();
    let mut row_logz = vec![0.0; n];
    let mut row_loss = vec![0.0; n];
    let blocks: Vec<(usize, usize)> = block_ranges(n);
    let results: Vec<(usize, Vec<f64>, Vec<f64>)> = blocks
        .par_iter()
        .map(|&(r0, nrows)| {
            let mut scores = vec![0.0; nrows * n];
            gemm_nt_block(x, r0, nrows, y, &mut scores);
            let mut logz = Vec::with_capacity(nrows);
            let mut loss = Vec::with_capacity(nrows);
            for local in 0..nrows {
                let row = &mut scores[local * n..(local + 1) * n];
                for s in row.iter_mut() {
                    *s *= inv_tau;
                }
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let sum: f64 = row.iter().map(|&t| (t - m).exp()).sum();
                let lz = m + sum.ln();
                logz.push(lz);
                loss.push(lz - row[r0 + local]);
            }
            (r0, logz, loss)
        })
        .collect();
    for (r0, logz, loss) in results {
        row_logz[r0..r0 + logz.len()].copy_from_slice(&logz);
        row_loss[r0..r0 + loss.len()].copy_from_slice(&loss);
    }
    (row_loss.iter().sum(), row_logz)
}

fn infonce_backward(
    x: &Mat,
    y: &Mat,
    inv_tau: f64,
    row_logz: &[f64],
    upstream: f64,
) -> (Mat, Mat) {
    let n = x.rows();
    let d = x.cols();
    let mut gx = Mat::zeros(n, d);
    let blocks: Vec<(usize, usize)> = block_ranges(n);
    // per-block partial gradients for y, reduced afterwards in block
    // order so the sum order is fixed
    let mut partials: Vec<(usize, Vec<f64>)> = Vec::with_capacity(blocks.len());
    let gx_data = gx.data_mut();
    let block_outputs: Vec<(usize, Vec<f64>, Vec<f64>)> = blocks
        .par_iter()
        .map(|&(r0, nrows)| {
            let mut dscore = vec![0.0; nrows * n];
            gemm_nt_block(x, r0, nrows, y, &mut dscore);
            for local in 0..nrows {
                let lz = row_logz[r0 + local];
                let row = &mut dscore[local * n..(local + 1) * n];
                for (v, s) in row.iter_mut().enumerate() {
                    let p = (*s * inv_tau - lz).exp();
                    let delta = if v == r0 + local { 1.0 } else { 0.0 };
                    *s = upstream * inv_tau * (p - delta);
                }
            }
            let mut gx_block = vec![0.0; nrows * d];
            gemm_nn(&dscore, nrows, n, y, &mut gx_block);
            let mut gy_partial = vec![0.0; n * d];
            let x_block = &x.data()[r0 * d..(r0 + nrows) * d];
            gemm_tn(&dscore, nrows, n, x_block, d, &mut gy_partial);
            (r0, gx_block, gy_partial)
        })
        .collect();
    for (r0, gx_block, gy_partial) in block_outputs {
        let nrows = gx_block.len() / d;
        gx_data[r0 * d..(r0 + nrows) * d].copy_from_slice(&gx_block);
        partials.push((r0, gy_partial));
    }
    let mut gy = Mat::zeros(n, d);
    for (_, partial) in partials {
        for (acc, v) in gy.data_mut().iter_mut().zip(partial.iter()) {
            *acc += *v;
        }
    }
    (gx, gy)
}

fn block_ranges(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut r0 = 0;
    while r0 < n {
        let nrows = ROW_BLOCK.min(n - r0);
        out.push((r0, nrows));
        r0 += nrows;
    }
    out
}

/// Max relative error between `analytic` and central finite differences
/// of `f` at `point`: `max_j |analytic_j - central_j| / max(1, |central_j|)`.
///
/// Panics if `f` returns a non-finite value.
pub fn grad_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    h: f64,
) -> f64 {
    assert_eq!(point.len(), analytic.len());
    let mut buf = point.to_vec();
    let mut worst: f64 = 0.0;
    for j in 0..point.len() {
        buf[j] = point[j] + h;
        let up = f(&buf);
        buf[j] = point[j] - h;
        let down = f(&buf);
        buf[j] = point[j];
        assert!(
            up.is_finite() && down.is_finite(),
            "objective returned a non-finite value during finite differencing"
        );
        let central = (up - down) / (2.0 * h);
        let err = (analytic[j] - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
