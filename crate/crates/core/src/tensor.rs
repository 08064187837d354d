//! Dense row-major matrices and the per-node feature layout used everywhere else.
//!
//! A [`FeatureMatrix`] stores node `i`'s `d × h` block in rows `i*d .. (i+1)*d`
//! of an `(n·d) × h` matrix. Because the storage is row-major the same buffer is
//! also an `n × (d·h)` matrix whose row `i` is the flattened block, and both views
//! are used without copying.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "buffer of length {} cannot be viewed as {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return shape_err(format!("row {r} has {} entries, expected {cols}", row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn reshaped(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.data.len() {
            return shape_err(format!(
                "cannot reshape {}x{} into {rows}x{cols}",
                self.rows, self.cols
            ));
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return shape_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        Ok(gemm_new(false, false, self, other))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `out = alpha * op(a) * op(b) + beta * out` on row-major buffers.
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    alpha: f64,
    a: &Tensor,
    b: &Tensor,
    beta: f64,
    out: &mut Tensor,
) {
    let (m, k, n) = gemm_dims(trans_a, trans_b, a, b);
    assert_eq!((out.rows, out.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in out.data.iter_mut() {
            *x *= beta;
        }
        return;
    }
    // SAFETY: out holds exactly m × n initialized values.
    unsafe { dgemm_into(trans_a, trans_b, alpha, a, b, beta, out.data.as_mut_ptr(), m, k, n) }
}

/// `op(a) * op(b)` in a fresh tensor. With β = 0 matrixmultiply never reads
/// the output, so the buffer is not zeroed first.
pub(crate) fn gemm_new(trans_a: bool, trans_b: bool, a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = gemm_dims(trans_a, trans_b, a, b);
    if m == 0 || n == 0 || k == 0 {
        return Tensor::zeros(m, n);
    }
    let len = m * n;
    let mut data = Vec::with_capacity(len);
    // SAFETY: the buffer has capacity m × n and dgemm writes every entry when
    // β = 0, so all of it is initialized before set_len.
    unsafe {
        dgemm_into(trans_a, trans_b, 1.0, a, b, 0.0, data.as_mut_ptr(), m, k, n);
        data.set_len(len);
    }
    Tensor { rows: m, cols: n, data }
}

fn gemm_dims(trans_a: bool, trans_b: bool, a: &Tensor, b: &Tensor) -> (usize, usize, usize) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    (m, k, n)
}

/// # Safety
/// `out` must point to `m × n` writable values, initialized unless β = 0.
#[allow(clippy::too_many_arguments)]
unsafe fn dgemm_into(
    trans_a: bool,
    trans_b: bool,
    alpha: f64,
    a: &Tensor,
    b: &Tensor,
    beta: f64,
    out: *mut f64,
    m: usize,
    k: usize,
    n: usize,
) {
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    matrixmultiply::dgemm(m, k, n, alpha, a.data.as_ptr(), rsa, csa, b.data.as_ptr(), rsb, csb, beta, out, n as isize, 1);
}

/// A 0-cochain: one `d × h` block per node.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    num_nodes: usize,
    stalk_dim: usize,
    channels: usize,
    values: Tensor,
}

impl FeatureMatrix {
    pub fn zeros(num_nodes: usize, stalk_dim: usize, channels: usize) -> Self {
        Self {
            num_nodes,
            stalk_dim,
            channels,
            values: Tensor::zeros(num_nodes * stalk_dim, channels),
        }
    }

    /// Wraps an `(n·d) × h` or `n × (d·h)` tensor.
    pub fn from_tensor(values: Tensor, num_nodes: usize, stalk_dim: usize) -> Result<Self> {
        if stalk_dim == 0 {
            return shape_err("feature matrix needs a positive stalk dimension");
        }
        let total = values.data.len();
        if num_nodes == 0 {
            return Ok(Self::zeros(0, stalk_dim, values.cols));
        }
        if total % (num_nodes * stalk_dim) != 0 {
            return shape_err(format!(
                "{total} values do not split into {num_nodes} blocks of {stalk_dim} rows"
            ));
        }
        let channels = total / (num_nodes * stalk_dim);
        Ok(Self {
            num_nodes,
            stalk_dim,
            channels,
            values: values.reshaped(num_nodes * stalk_dim, channels)?,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn stalk_dim(&self) -> usize {
        self.stalk_dim
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn block_len(&self) -> usize {
        self.stalk_dim * self.channels
    }

    /// The `(n·d) × h` view.
    pub fn as_tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    /// Node `i`'s block, flattened row-major.
    pub fn block(&self, i: usize) -> &[f64] {
        let len = self.block_len();
        &self.values.data[i * len..(i + 1) * len]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.block_len();
        &mut self.values.data[i * len..(i + 1) * len]
    }

    /// The `n × (d·h)` view, copied.
    pub fn flattened(&self) -> Tensor {
        Tensor {
            rows: self.num_nodes,
            cols: self.block_len(),
            data: self.values.data.clone(),
        }
    }

    pub fn max_abs_diff(&self, other: &FeatureMatrix) -> f64 {
        self.values.max_abs_diff(&other.values)
    }

    pub fn same_shape(&self, other: &FeatureMatrix) -> bool {
        self.num_nodes == other.num_nodes
            && self.stalk_dim == other.stalk_dim
            && self.channels == other.channels
    }
}
