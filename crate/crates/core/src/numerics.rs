//! Dense 64-bit kernels shared by the model, scoring and metrics code.

use std::cmp::Ordering;
use std::collections::VecDeque;

use crate::error::{ensure, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Dimension,
            "{} values cannot fill a {rows}x{cols} matrix",
            data.len()
        );
        ensure!(data.iter().all(|x| x.is_finite()), Domain, "matrix entries must be finite");
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(rows.iter().all(|r| r.len() == cols), Dimension, "ragged rows");
        Mat::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Mat {
        Mat {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    /// Scales columns `start..end` in place.
    pub fn scale_cols(&mut self, start: usize, end: usize, factor: f64) {
        for r in 0..self.rows {
            for c in start..end {
                self.data[r * self.cols + c] *= factor;
            }
        }
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    ensure!(
        a.cols == b.rows,
        Dimension,
        "cannot multiply {}x{} by {}x{}",
        a.rows,
        a.cols,
        b.rows,
        b.cols
    );
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Row vector times matrix: `x · m`.
pub fn vec_mat(x: &[f64], m: &Mat) -> Result<Vec<f64>> {
    ensure!(
        x.len() == m.rows,
        Dimension,
        "vector of length {} times {}x{} matrix",
        x.len(),
        m.rows,
        m.cols
    );
    let mut out = vec![0.0; m.cols];
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(m.row(k)) {
            *o += xk * w;
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_row(logits: &[f64]) -> Result<Vec<f64>> {
    ensure!(!logits.is_empty(), Domain, "softmax of an empty vector");
    ensure!(logits.iter().all(|x| x.is_finite()), Domain, "softmax logits must be finite");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Induced matrix 1-norm: the largest column absolute sum.
pub fn induced_one_norm(m: &Mat) -> f64 {
    let mut sums = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (s, x) in sums.iter_mut().zip(m.row(r)) {
            *s += x.abs();
        }
    }
    sums.into_iter().fold(0.0, f64::max)
}

/// Stride-1 max filter of odd width, window clipped at both ends.
pub fn maxpool1d(s: &[f64], kernel: usize) -> Result<Vec<f64>> {
    ensure!(kernel % 2 == 1, Config, "pooling kernel must be odd, got {kernel}");
    let half = kernel / 2;
    let n = s.len();
    let mut out = Vec::with_capacity(n);
    // monotone deque of indices with decreasing values
    let mut dq: VecDeque<usize> = VecDeque::new();
    let mut pushed = 0;
    for i in 0..n {
        let hi = (i + half).min(n - 1);
        while pushed <= hi {
            while dq.back().is_some_and(|&b| s[b] <= s[pushed]) {
                dq.pop_back();
            }
            dq.push_back(pushed);
            pushed += 1;
        }
        let lo = i.saturating_sub(half);
        while dq.front().is_some_and(|&f| f < lo) {
            dq.pop_front();
        }
        out.push(s[*dq.front().expect("window is never empty")]);
    }
    Ok(out)
}

/// Ranking order: larger score first, smaller index on ties.
#[inline]
pub(crate) fn rank_cmp(s: &[f64], a: usize, b: usize) -> Ordering {
    s[b].total_cmp(&s[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest entries in rank order (ties: smaller index first).
pub fn top_k_indices(s: &[f64], k: usize) -> Result<Vec<usize>> {
    ensure!(k <= s.len(), Domain, "top-{k} requested from {} entries", s.len());
    let mut idx: Vec<usize> = (0..s.len()).collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(s, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_cmp(s, a, b));
    Ok(idx)
}

/// Mean squared deviation (divisor n), accumulated with Welford's update.
pub fn population_variance(xs: &[f64]) -> Result<f64> {
    ensure!(!xs.is_empty(), Domain, "variance of an empty sample");
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    Ok(m2 / xs.len() as f64)
}

/// Floor added inside the logarithm of [`cross_entropy`].
pub const CE_EPS: f64 = 1e-12;

/// `-Σ p[i] ln(q[i] + ε)`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    ensure!(
        p.len() == q.len(),
        Dimension,
        "distributions of length {} and {}",
        p.len(),
        q.len()
    );
    for (name, v) in [("p", p), ("q", q)] {
        let sum: f64 = v.iter().sum();
        ensure!(
            v.iter().all(|&x| x >= 0.0) && (sum - 1.0).abs() <= 1e-9,
            Domain,
            "{name} is not a probability vector"
        );
    }
    Ok(-p.iter().zip(q).map(|(&pi, &qi)| pi * (qi + CE_EPS).ln()).sum::<f64>())
}
