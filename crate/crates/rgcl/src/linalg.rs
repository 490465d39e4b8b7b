//! Row-major dense matrices and the blocked products behind the heavy
//! code paths (similarity matrices, ranking scores).
//!
//! Parallel kernels always partition work into fixed-size row blocks, so
//! the floating-point accumulation order (and therefore the result, bit
//! for bit) never depends on the number of worker threads.

use rayon::prelude::*;

/// Row block size for parallel products. Fixed so the work partition is
/// independent of thread count.
pub(crate) const ROW_BLOCK: usize = 256;

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match rows*cols");
        Mat { rows, cols, data }
    }

    /// 1x1 matrix holding a scalar.
    pub fn scalar(v: f64) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_scalar(&self) -> f64 {
        assert!(self.rows == 1 && self.cols == 1, "matrix is not 1x1");
        self.data[0]
    }

    /// New matrix whose i-th row is `self.row(idx[i])`.
    pub fn gather_rows(&self, idx: &[usize]) -> Mat {
        let mut out = Mat::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            assert!(src < self.rows, "row index {src} out of range");
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for a in self.data.iter_mut() {
            *a *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Largest absolute elementwise difference between two same-shape matrices.
pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.cols, b.cols);
    a.data
        .iter()
        .zip(b.data.iter())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// y += alpha * x
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * *xi;
    }
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn linf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Sign with `sign(0) = 0`. (`f64::signum` maps 0.0 to 1.0, which is not
/// what the perturbation math wants.)
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `A · Bᵀ` for row-major `A: m×k`, `B: n×k`. Parallel over fixed-size
/// row blocks of `A`.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "inner dimensions must match");
    let n = b.rows;
    let mut out = Mat::zeros(a.rows, n);
    if a.rows == 0 || n == 0 {
        return out;
    }
    let k = a.cols;
    out.data
        .par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(bi, chunk)| {
            let r0 = bi * ROW_BLOCK;
            let nrows = chunk.len() / n;
            gemm_nt_block(a, r0, nrows, b, chunk);
        });
    let _ = k;
    out
}

/// `out = A[r0..r0+nrows) · Bᵀ` as one dense product call.
pub(crate) fn gemm_nt_block(a: &Mat, r0: usize, nrows: usize, b: &Mat, out: &mut [f64]) {
    let k = a.cols;
    let n = b.rows;
    debug_assert_eq!(out.len(), nrows * n);
    if nrows == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            nrows,
            k,
            n,
            1.0,
            a.data.as_ptr().add(r0 * k),
            k as isize,
            1,
            b.data.as_ptr(),
            1,
            k as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out = A · B` for row-major `A: m×k` (slice) and `B: k×n`.
pub(crate) fn gemm_nn(a: &[f64], m: usize, k: usize, b: &Mat, out: &mut [f64]) {
    assert_eq!(b.rows, k);
    let n = b.cols;
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out = Aᵀ · B` where `A: p×q` and `B: p×n` are row-major slices;
/// the result is `q×n`.
pub(crate) fn gemm_tn(a: &[f64], p: usize, q: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), q * n);
    if p == 0 || q == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            q,
            p,
            n,
            1.0,
            a.as_ptr(),
            1,
            q as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
