//! Dense row-major f32 tensors and the handful of kernels the decoder needs.
//!
//! Every reduction runs in a fixed order so repeated calls are bit-identical.
//! Softmax and RoPE angles are evaluated in f64 and rounded back to f32.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(ShapeMismatch),
    #[error("invalid parameter: {0}")]
    Param(&'static str),
}

/// Describes a failed shape check.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeMismatch {
    pub op: &'static str,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

impl fmt::Display for ShapeMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?} vs {:?}", self.op, self.left, self.right)
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::Shape(ShapeMismatch { op, left: left.to_vec(), right: right.to_vec() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows along the leading dimension.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per leading-dimension row.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Appends one leading-dimension row.
    pub fn push_row(&mut self, row: &[f32]) -> Result<(), TensorError> {
        if self.shape.is_empty() || row.len() != self.row_len() {
            return Err(shape_err("push_row", &self.shape, &[row.len()]));
        }
        self.data.extend_from_slice(row);
        self.shape[0] += 1;
        Ok(())
    }

    /// Builds a tensor from the given leading-dimension rows, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor { shape, data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a [m×k] · b [k×n]`, accumulating left to right over `k`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(shape_err("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// Row-wise softmax of `logits / temperature`.
pub fn softmax_rows(logits: &Tensor, temperature: f32) -> Result<Tensor, TensorError> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(TensorError::Param("temperature must be positive"));
    }
    if logits.shape.len() != 2 {
        return Err(shape_err("softmax_rows", &logits.shape, &[]));
    }
    let n = logits.shape[1];
    let mut out = Vec::with_capacity(logits.len());
    let mut buf = vec![0.0f64; n];
    for row in logits.data.chunks(n.max(1)).take(logits.shape[0]) {
        let t = f64::from(temperature);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v) / t));
        let mut sum = 0.0f64;
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = libm::exp(f64::from(v) / t - max);
            sum += *b;
        }
        out.extend(buf.iter().map(|&b| (b / sum) as f32));
    }
    Ok(Tensor { shape: logits.shape.clone(), data: out })
}

/// Rotary embedding parameters. Pairs `(2i, 2i+1)` rotate at `theta^(-2i/d_head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeParams {
    theta: f32,
    d_head: usize,
    inv_freq: Vec<f64>,
}

impl RopeParams {
    pub fn new(theta: f32, d_head: usize) -> Result<Self, TensorError> {
        if !theta.is_finite() || theta <= 0.0 {
            return Err(TensorError::Param("rope theta must be positive"));
        }
        if d_head == 0 || !d_head.is_multiple_of(2) {
            return Err(TensorError::Param("rope d_head must be even and positive"));
        }
        let inv_freq = (0..d_head / 2)
            .map(|i| libm::pow(f64::from(theta), -((2 * i) as f64) / d_head as f64))
            .collect();
        Ok(Self { theta, d_head, inv_freq })
    }

    pub fn theta(&self) -> f32 {
        self.theta
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    /// Rotates one `d_head`-long vector by `offset` positions in place.
    pub fn rotate(&self, x: &mut [f32], offset: f64) {
        if offset == 0.0 {
            return;
        }
        for (pair, &f) in x.chunks_exact_mut(2).zip(&self.inv_freq) {
            let (s, c) = libm::sincos(offset * f);
            let (s, c) = (s as f32, c as f32);
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * c - x1 * s;
            pair[1] = x0 * s + x1 * c;
        }
    }
}

/// Applies RoPE to every head-row of `v` (`[n × d_head]` or `[n × H × d_head]`),
/// row `i` at `positions[i]`.
pub fn rope_apply(v: &Tensor, positions: &[usize], params: &RopeParams) -> Result<Tensor, TensorError> {
    check_rope_shape(v, params)?;
    if positions.len() != v.rows() {
        return Err(shape_err("rope_apply", &v.shape, &[positions.len()]));
    }
    let mut out = v.clone();
    for (i, &p) in positions.iter().enumerate() {
        for head in out.row_mut(i).chunks_exact_mut(params.d_head) {
            params.rotate(head, p as f64);
        }
    }
    Ok(out)
}

/// Moves an already-rotated key tensor by `delta` positions.
/// A negative `delta` rotates backwards.
pub fn rope_shift(k: &Tensor, delta: i64, params: &RopeParams) -> Result<Tensor, TensorError> {
    check_rope_shape(k, params)?;
    let mut out = k.clone();
    if delta != 0 {
        for head in out.data.chunks_exact_mut(params.d_head) {
            params.rotate(head, delta as f64);
        }
    }
    Ok(out)
}

fn check_rope_shape(v: &Tensor, params: &RopeParams) -> Result<(), TensorError> {
    if v.shape.len() < 2 || v.shape.last() != Some(&params.d_head) {
        return Err(shape_err("rope", &v.shape, &[params.d_head]));
    }
    Ok(())
}

/// RMS normalization of each row of `x [n × d]`, scaled by `weight [d]`.
pub fn rmsnorm(x: &Tensor, weight: &Tensor, eps: f32) -> Result<Tensor, TensorError> {
    let d = weight.len();
    if x.shape.len() != 2 || x.shape[1] != d {
        return Err(shape_err("rmsnorm", &x.shape, &weight.shape));
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(d.max(1)) {
        rmsnorm_row(row, &weight.data, eps);
    }
    Ok(out)
}

pub(crate) fn rmsnorm_row(row: &mut [f32], weight: &[f32], eps: f32) {
    let ms = row.iter().map(|v| v * v).sum::<f32>() / row.len() as f32;
    let inv = 1.0 / libm::sqrtf(ms + eps);
    for (v, w) in row.iter_mut().zip(weight) {
        *v = *v * inv * w;
    }
}

/// Sum of squared elementwise differences.
pub fn l2sq_diff(a: &Tensor, b: &Tensor) -> Result<f64, TensorError> {
    if a.shape != b.shape {
        return Err(shape_err("l2sq_diff", &a.shape, &b.shape));
    }
    Ok(l2sq_slices(&a.data, &b.data))
}

pub(crate) fn l2sq_slices(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}
