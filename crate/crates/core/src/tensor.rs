//! Dense row-major matrices plus the loss functions used in training.
//!
//! Kernels fix their summation order, so results are bit-reproducible
//! across runs. Accumulation uses independent partial sums where it
//! matters for throughput; the order is part of the numeric contract.

use crate::error::{Error, Result};

/// Floor added inside logarithms so degenerate probabilities stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

/// Dense 2-D array of `f64`, row-major. Zero rows are allowed (an empty
/// batch); zero columns are not.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::shape("Matrix::new", format!("{rows}x{cols}"), "cols >= 1"));
        }
        if rows * cols != values.len() {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols}"),
                format!("{} values", values.len()),
            ));
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(cols >= 1, "zero-width matrix");
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::shape("Matrix::from_rows", "0 rows", "at least 1"));
        };
        let cols = first.len();
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("row of {}", r.len()),
                    format!("row of {cols}"),
                ));
            }
            values.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        assert!(self.rows >= 1, "transpose of an empty matrix");
        let mut values = vec![0.0; self.values.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                values[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }

    pub fn add_in_place(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape("add", other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        self.check_same_shape("add_scaled", other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.values {
            *a *= s;
        }
    }

    pub fn hadamard_in_place(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape("hadamard", other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a *= b;
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_bias(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::shape(
                "add_row_bias",
                format!("{}x{}", self.rows, self.cols),
                format!("bias of {}", bias.len()),
            ));
        }
        for row in self.values.chunks_exact_mut(self.cols) {
            for (a, b) in row.iter_mut().zip(bias) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn relu_in_place(&mut self) {
        for a in &mut self.values {
            if *a < 0.0 {
                *a = 0.0;
            }
        }
    }

    /// Zeroes every entry of `self` where `pre` is not strictly positive.
    /// This is the backward gate of the ReLU applied to `pre`.
    pub fn mask_nonpositive(&mut self, pre: &Matrix) -> Result<()> {
        self.check_same_shape("mask_nonpositive", pre)?;
        for (a, z) in self.values.iter_mut().zip(&pre.values) {
            if *z <= 0.0 {
                *a = 0.0;
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape("max_abs_diff", other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn check_same_shape(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

/// Dot product with eight independent partial sums. The fixed reduction
/// tree keeps the result identical from run to run while letting the
/// backend pipeline the multiply-adds.
#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let head = x.len() - x.len() % 8;
    let mut acc = [0.0f64; 8];
    for (cx, cy) in x[..head].chunks_exact(8).zip(y[..head].chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += cx[l] * cy[l];
        }
    }
    let mut tail = 0.0;
    for (u, v) in x[head..].iter().zip(&y[head..]) {
        tail += u * v;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `a · b`.
pub fn gemm(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "gemm",
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let n = b.cols;
    let mut values = vec![0.0; a.rows * n];
    for (arow, orow) in a.values.chunks_exact(a.cols).zip(values.chunks_exact_mut(n)) {
        for (&aik, brow) in arow.iter().zip(b.values.chunks_exact(n)) {
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Matrix {
        rows: a.rows,
        cols: n,
        values,
    })
}

/// `a · bᵀ`. Row-vs-row dot products, the layout-friendly direction for
/// both matrices.
pub fn gemm_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols || b.rows == 0 {
        return Err(Error::shape(
            "gemm_nt",
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let mut values = Vec::with_capacity(a.rows * b.rows);
    for arow in a.values.chunks_exact(a.cols) {
        for brow in b.values.chunks_exact(b.cols) {
            values.push(dot(arow, brow));
        }
    }
    Ok(Matrix {
        rows: a.rows,
        cols: b.rows,
        values,
    })
}

/// `aᵀ · b`, accumulated as a sum of row outer products. An empty batch
/// (zero rows) yields the zero matrix.
pub fn gemm_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "gemm_tn",
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let n = b.cols;
    let mut values = vec![0.0; a.cols * n];
    for (arow, brow) in a.values.chunks_exact(a.cols).zip(b.values.chunks_exact(n)) {
        for (&ati, orow) in arow.iter().zip(values.chunks_exact_mut(n)) {
            for (o, &btj) in orow.iter_mut().zip(brow) {
                *o += ati * btj;
            }
        }
    }
    Ok(Matrix {
        rows: a.cols,
        cols: n,
        values,
    })
}

/// Row-wise softmax with max subtraction, so large logits cannot
/// overflow the exponential.
pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for row in out.values.chunks_exact_mut(out.cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

/// Mean negative log-likelihood of `labels` under row distributions
/// `probs`.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != probs.rows || probs.rows == 0 {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} rows", probs.rows),
            format!("{} labels", labels.len()),
        ));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= probs.cols {
            return Err(Error::shape(
                "cross_entropy",
                format!("label {y}"),
                format!("{} classes", probs.cols),
            ));
        }
        total -= (probs.get(i, y) + LOG_FLOOR).ln();
    }
    Ok(total / probs.rows as f64)
}

/// Gradient of [`cross_entropy`] with respect to the logits that
/// produced `probs`: `(probs - onehot(labels)) / n`.
pub fn cross_entropy_grad(probs: &Matrix, labels: &[usize]) -> Result<Matrix> {
    if labels.len() != probs.rows || probs.rows == 0 {
        return Err(Error::shape(
            "cross_entropy_grad",
            format!("{} rows", probs.rows),
            format!("{} labels", labels.len()),
        ));
    }
    let mut out = probs.clone();
    let inv_n = 1.0 / probs.rows as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y >= probs.cols {
            return Err(Error::shape(
                "cross_entropy_grad",
                format!("label {y}"),
                format!("{} classes", probs.cols),
            ));
        }
        let base = i * probs.cols;
        out.values[base + y] -= 1.0;
        for v in &mut out.values[base..base + probs.cols] {
            *v *= inv_n;
        }
    }
    Ok(out)
}

/// Distillation loss between teacher and student logits at temperature
/// `t`: the mean row-wise KL divergence of the tempered distributions,
/// scaled by `t²` so its gradient magnitude stays comparable across
/// temperatures.
pub fn kl_distill_loss(teacher_logits: &Matrix, student_logits: &Matrix, t: f64) -> Result<f64> {
    teacher_logits.check_same_shape("kl_distill_loss", student_logits)?;
    if teacher_logits.rows == 0 {
        return Err(Error::shape("kl_distill_loss", "0 rows", "at least 1"));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive and finite, got {t}")));
    }
    let mut p = teacher_logits.clone();
    p.scale(1.0 / t);
    let p = softmax_rows(&p);
    let mut q = student_logits.clone();
    q.scale(1.0 / t);
    let q = softmax_rows(&q);

    let mut total = 0.0;
    for (prow, qrow) in p.values.chunks_exact(p.cols).zip(q.values.chunks_exact(q.cols)) {
        let mut row_kl = 0.0;
        for (&pi, &qi) in prow.iter().zip(qrow) {
            if pi > 0.0 {
                row_kl += pi * (pi.ln() - (qi + LOG_FLOOR).ln());
            }
        }
        // The log floor can push a vanishing divergence a hair below
        // zero; KL itself cannot be negative.
        total += row_kl.max(0.0);
    }
    Ok(t * t * total / p.rows as f64)
}
