//! Dense row-major tensors and the small set of plain (non-recorded) kernels
//! shared between the tape and the rest of the crate.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};

/// Contiguous 64-bit float tensor, row-major. Entries are validated finite
/// at construction; internal ops keep that invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err("tensor construction", expected, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 0,
        }
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err("item()", 1usize, self.data.len()));
        }
        Ok(self.data[0])
    }

    pub(crate) fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    libm::sqrt(s)
}

/// Normalize to unit L2 norm; returns the input unchanged when its norm is
/// too small to divide by.
pub fn normalize(v: &mut [f64]) {
    let n = l2_norm(v);
    if n > 1e-12 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Stable softmax over a vector (max-subtraction applied internally).
///
/// Outputs are nonnegative and sum to 1 within 1e-12; adding a constant to
/// all logits leaves the result unchanged up to that tolerance.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| libm::exp(v - max)).collect();
    let sum: f64 = out.iter().sum();
    for v in out.iter_mut() {
        *v /= sum;
    }
    Ok(out)
}

/// Softmax restricted to masked-in positions. Masked-out positions receive
/// probability exactly 0.0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(shape_err("masked_softmax", logits.len(), mask.len()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("masked_softmax input"));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyInput("masked_softmax: all-zero mask"));
    }
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for i in 0..logits.len() {
        if mask[i] {
            let e = libm::exp(logits[i] - max);
            out[i] = e;
            sum += e;
        }
    }
    for (i, v) in out.iter_mut().enumerate() {
        if mask[i] {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Log-probability of `index` under the masked softmax of `logits`.
pub fn masked_log_prob(logits: &[f64], mask: &[bool], index: usize) -> Result<f64> {
    if logits.len() != mask.len() {
        return Err(shape_err("masked_log_prob", logits.len(), mask.len()));
    }
    if index >= logits.len() || !mask[index] {
        return Err(Error::InvalidArgument(alloc::format!(
            "masked_log_prob: index {index} not in the candidate set"
        )));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| libm::exp(v - max))
        .sum();
    Ok(logits[index] - max - libm::log(sum))
}

/// Single-head scaled dot-product attention: row i of the output is
/// `softmax(Q_i K^T / sqrt(scale)) V`. Attention weights per row sum to 1.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
    if scale <= 0.0 {
        return Err(Error::InvalidArgument(alloc::string::String::from(
            "attention scale must be positive",
        )));
    }
    let (n, d) = (q.rows(), q.cols());
    if k.rows() != n || k.cols() != d || v.rows() != n || v.cols() != d {
        return Err(shape_err("scaled_dot_attention", q.shape(), k.shape()));
    }
    let inv = 1.0 / libm::sqrt(scale);
    let mut out = vec![0.0; n * d];
    let mut scores = vec![0.0; n];
    for i in 0..n {
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(q.row_slice(i), k.row_slice(j)) * inv;
        }
        let weights = softmax(&scores)?;
        for (j, w) in weights.iter().enumerate() {
            let vr = v.row_slice(j);
            for c in 0..d {
                out[i * d + c] += w * vr[c];
            }
        }
    }
    Tensor::new(vec![n, d], out)
}
