//! Dense `f64` matrices and the handful of kernels the decoder needs.
//!
//! Everything here is a pure function over immutable inputs. Summation
//! order is fixed (ascending inner index, accumulator starting at `0.0`)
//! so products are bit-reproducible across runs and platforms.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("top-k of {k} requested from {len} values")]
    TopKOutOfRange { k: usize, len: usize },
}

/// Row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.cols != b.rows {
        return Err(TensorError::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let dst = &mut out.data[i * b.cols..(i + 1) * b.cols];
        // i-k-j order: every dst[j] still accumulates a[i,k]*b[k,j] for k = 0, 1, ...
        for (k, &aik) in a.row(i).iter().enumerate() {
            for (d, &bkj) in dst.iter_mut().zip(b.row(k)) {
                *d += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Row vector times matrix: `x · m`, same summation order as [`matmul`].
pub fn vecmat(x: &[f64], m: &Matrix) -> Result<Vec<f64>, TensorError> {
    if x.len() != m.rows {
        return Err(TensorError::Shape(format!(
            "cannot multiply 1x{} by {}x{}",
            x.len(),
            m.rows,
            m.cols
        )));
    }
    let mut out = vec![0.0; m.cols];
    for (k, &xk) in x.iter().enumerate() {
        for (d, &mkj) in out.iter_mut().zip(m.row(k)) {
            *d += xk * mkj;
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// In-place softmax with max subtraction. An empty slice is left alone.
pub fn softmax_in_place(row: &mut [f64]) {
    let Some(max) = row.iter().copied().reduce(f64::max) else {
        return;
    };
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax. With `causal` set, entry `(i, k)` for `k > i` is masked:
/// it is excluded from the normalisation and emitted as exactly `0.0`.
pub fn masked_row_softmax(scores: &Matrix, causal: bool) -> Result<Matrix, TensorError> {
    if causal && scores.rows != scores.cols {
        return Err(TensorError::Shape(format!(
            "causal mask needs a square matrix, got {}x{}",
            scores.rows, scores.cols
        )));
    }
    let mut out = scores.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let visible = if causal { i + 1 } else { row.len() };
        let (head, tail) = row.split_at_mut(visible);
        softmax_in_place(head);
        tail.fill(0.0);
    }
    Ok(out)
}

/// Indices of the `k` largest values, returned in ascending index order.
///
/// Ties rank the smaller index first. Values are compared with
/// [`f64::total_cmp`], so the result is defined for any input.
pub fn argtopk(values: &[f64], k: usize) -> Result<Vec<usize>, TensorError> {
    if k > values.len() {
        return Err(TensorError::TopKOutOfRange {
            k,
            len: values.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let rank =
        |a: &usize, b: &usize| -> Ordering { values[*b].total_cmp(&values[*a]).then(a.cmp(b)) };
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, rank);
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Index of the largest value, lowest index on ties. `None` for an empty slice.
pub fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if v.total_cmp(&b) != Ordering::Greater => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Scale by the reciprocal root-mean-square of the entries.
pub fn rms_norm(x: &[f64]) -> Vec<f64> {
    const EPS: f64 = 1e-6;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}
