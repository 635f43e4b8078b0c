//! Dense row-major `f64` tensors (rank 1..=3) and the forward/backward
//! pairs used throughout the attention kernels and the model.
//!
//! Every differentiable forward op here has exactly one paired backward
//! that returns vector-Jacobian products; callers compose them by hand.

use crate::error::{Error, Result};

/// Dense row-major tensor of rank 1 to 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::InvalidShape {
                what: "tensor",
                detail: format!("rank must be 1..=3, got {:?}", shape),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                what: "tensor",
                detail: format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    /// Build a rank-2 tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * n);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::InvalidShape {
                    what: "rows",
                    detail: format!("row {} has length {}, expected {}", i, r.len(), n),
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a rank-2 tensor (last dim for rank >= 2).
    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert_eq!(self.rank(), 2);
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    /// Column slice [lo, hi) of a rank-2 tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        debug_assert!(lo <= hi && hi <= n);
        let w = hi - lo;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + lo..i * n + hi]);
        }
        Tensor { shape: vec![m, w], data: out }
    }

    /// Write `src` into columns [lo, lo + src.cols()) of `self`.
    pub fn set_cols(&mut self, lo: usize, src: &Tensor) {
        let n = self.cols();
        let w = src.cols();
        debug_assert_eq!(self.rows(), src.rows());
        debug_assert!(lo + w <= n);
        for i in 0..self.rows() {
            self.data[i * n + lo..i * n + lo + w].copy_from_slice(src.row(i));
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// In-place `self += other`, shapes must already agree.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "sub",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

fn require_rank2(t: &Tensor, op: &'static str) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::InvalidShape {
            what: op,
            detail: format!("expected rank-2 tensor, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

/// `a[m,k] * b[k,n] -> [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_rank2(a, "matmul")?;
    require_rank2(b, "matmul")?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    // i-p-j order keeps both inner accesses contiguous.
    for i in 0..m {
        let a_row = a.row(i);
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m,k] * b[n,k]^T -> [m,n]` without materializing the transpose.
pub fn matmul_transpose_b(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_rank2(a, "matmul_transpose_b")?;
    require_rank2(b, "matmul_transpose_b")?;
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_transpose_b",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = a.row(i);
        for j in 0..n {
            let b_row = b.row(j);
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[k,m]^T * b[k,n] -> [m,n]` without materializing the transpose.
pub fn matmul_transpose_a(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_rank2(a, "matmul_transpose_a")?;
    require_rank2(b, "matmul_transpose_a")?;
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_transpose_a",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    for r in 0..k {
        let a_row = a.row(r);
        let b_row = b.row(r);
        for (p, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Batched matmul over the leading index: `a[b,m,k] * b[b,k,n] -> [b,m,n]`.
pub fn batched_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "batched_matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (k2, n) = (b.shape()[1], b.shape()[2]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "batched_matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(bs * m * n);
    for idx in 0..bs {
        let sa = Tensor::new(vec![m, k], a.data[idx * m * k..(idx + 1) * m * k].to_vec())?;
        let sb = Tensor::new(vec![k, n], b.data[idx * k * n..(idx + 1) * k * n].to_vec())?;
        out.extend_from_slice(matmul(&sa, &sb)?.data());
    }
    Tensor::new(vec![bs, m, n], out)
}

/// Gradients of `c = a * b`: `(g * b^T, a^T * g)`.
pub fn matmul_backward(grad: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    if grad.shape() != [a.rows(), b.cols()] {
        return Err(Error::ShapeMismatch {
            op: "matmul_backward",
            left: grad.shape().to_vec(),
            right: vec![a.rows(), b.cols()],
        });
    }
    let da = matmul_transpose_b(grad, b)?;
    let db = matmul_transpose_a(a, grad)?;
    Ok((da, db))
}

/// Row-wise softmax with row-max subtraction. `-inf` entries map to exact 0.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    require_rank2(x, "softmax_rows")?;
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[i * n..(i + 1) * n];
        let mut sum = 0.0;
        for (oj, &v) in o.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *oj = e;
            sum += e;
        }
        for oj in o.iter_mut() {
            *oj /= sum;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Gradient of row-wise softmax, from the saved output `y`.
///
/// `dx_ij = y_ij * (g_ij - sum_k g_ik y_ik)`; rows with masked (zero)
/// entries get exact zero gradient there.
pub fn softmax_rows_backward(grad: &Tensor, y: &Tensor) -> Result<Tensor> {
    if grad.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "softmax_rows_backward",
            left: grad.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let (m, n) = (y.rows(), y.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let g = grad.row(i);
        let yr = y.row(i);
        let dot: f64 = g.iter().zip(yr).map(|(a, b)| a * b).sum();
        let o = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            o[j] = yr[j] * (g[j] - dot);
        }
    }
    Tensor::new(vec![m, n], out)
}

pub const ROW_NORM_EPS: f64 = 1e-12;

/// Scale every row to unit Euclidean norm.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    require_rank2(x, "l2_normalize_rows")?;
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ROW_NORM_EPS {
            return Err(Error::DegenerateRow {
                row: i,
                detail: format!("norm {:.3e} below {:.0e}", norm, ROW_NORM_EPS),
            });
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
            *o = v / norm;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Gradient of row L2 normalization from the saved input `x`.
///
/// With `u = x/|x|`: `dx = (g - (g . u) u) / |x|` per row.
pub fn l2_normalize_rows_backward(grad: &Tensor, x: &Tensor) -> Result<Tensor> {
    if grad.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "l2_normalize_rows_backward",
            left: grad.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let xr = x.row(i);
        let g = grad.row(i);
        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = g.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / (norm * norm);
        let o = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            o[j] = (g[j] - dot * xr[j]) / norm;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise layer normalization with affine gain/bias.
pub fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    require_rank2(x, "layer_norm_rows")?;
    let (m, n) = (x.rows(), x.cols());
    if gain.shape() != [n] || bias.shape() != [n] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm_rows",
            left: vec![n],
            right: gain.shape().to_vec(),
        });
    }
    if n < 2 {
        return Err(Error::InvalidShape {
            what: "layer_norm_rows",
            detail: format!("need at least 2 columns, got {}", n),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let o = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            o[j] = (row[j] - mean) * inv * gain.data()[j] + bias.data()[j];
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Gradient of layer normalization. Returns `(dx, dgain, dbias)`.
pub fn layer_norm_rows_backward(
    grad: &Tensor,
    x: &Tensor,
    gain: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    if grad.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "layer_norm_rows_backward",
            left: grad.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    let (m, n) = (x.rows(), x.cols());
    let nf = n as f64;
    let mut dx = vec![0.0; m * n];
    let mut dgain = vec![0.0; n];
    let mut dbias = vec![0.0; n];
    for i in 0..m {
        let row = x.row(i);
        let g = grad.row(i);
        let mean = row.iter().sum::<f64>() / nf;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let inv = 1.0 / (var + eps).sqrt();

        // xhat and the upstream through the affine part
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..n {
            let xhat = (row[j] - mean) * inv;
            let dxhat = g[j] * gain.data()[j];
            dgain[j] += g[j] * xhat;
            dbias[j] += g[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= nf;
        mean_dxhat_xhat /= nf;
        let o = &mut dx[i * n..(i + 1) * n];
        for j in 0..n {
            let xhat = (row[j] - mean) * inv;
            let dxhat = g[j] * gain.data()[j];
            o[j] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    Ok((
        Tensor::new(vec![m, n], dx)?,
        Tensor::new(vec![n], dgain)?,
        Tensor::new(vec![n], dbias)?,
    ))
}

/// ReLU, used by the feed-forward blocks.
pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape().to_vec(),
        data: x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    }
}

/// Gradient of ReLU from the saved input.
pub fn relu_backward(grad: &Tensor, x: &Tensor) -> Tensor {
    debug_assert_eq!(grad.shape(), x.shape());
    Tensor {
        shape: x.shape().to_vec(),
        data: grad
            .data()
            .iter()
            .zip(x.data())
            .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// A tensor paired with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter { value, grad }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }

    pub fn accumulate(&mut self, grad: &Tensor) {
        self.grad.add_assign(grad);
    }
}
