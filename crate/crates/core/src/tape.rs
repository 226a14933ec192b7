//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! Each forward pass records tensor-level operations into a fresh [`Tape`];
//! [`Tape::backward`] replays them in reverse and accumulates parameter
//! gradients into the [`ParamStore`]. The tape is consumed by backward:
//! running it twice without a new forward pass is an error.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{softmax, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    ClampMin(usize, f64),
    Sum(usize),
    /// A[m,k] * B[k,n]
    MatMul(usize, usize),
    /// A[m,k] * B[n,k]^T
    MatMulNt(usize, usize),
    /// W[m,n] * x[n]
    MatVec(usize, usize),
    /// Gather rows of a table by index.
    EmbedRows(usize, Vec<usize>),
    /// Column-wise concatenation of two matrices with equal row counts.
    ConcatCols(usize, usize),
    /// Concatenation of two vectors.
    ConcatVec(usize, usize),
    /// Contiguous slice of a vector: (src, start, len).
    SliceVec(usize, usize, usize),
    /// Single row of a matrix.
    Row(usize, usize),
    /// Column means of a matrix.
    MeanRows(usize),
    /// Row-wise stable softmax of a matrix.
    SoftmaxRows(usize),
    /// Log-probability of one index under a masked softmax of a logit
    /// vector; masked-out logits contribute nothing.
    MaskedLogProb {
        logits: usize,
        mask: Vec<bool>,
        index: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Ordered record of the primitive operations of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, usize)>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Record a constant leaf (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_vec(&mut self, data: &[f64]) -> Result<Var> {
        Ok(self.constant(Tensor::vector(data.to_vec())?))
    }

    /// Register a parameter as a leaf. Registering the same parameter
    /// twice returns the same node, so gradients accumulate naturally.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, node)) = self.param_nodes.iter().find(|(pid, _)| *pid == id) {
            return Var(node);
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        self.param_nodes.push((id, v.0));
        v
    }

    fn binary_same_shape(&mut self, context: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                context,
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a.0, b.0)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Div(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(x.0, s)))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v + s).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddScalar(x.0, s)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| libm::tanh(v)).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Tanh(x.0)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| libm::exp(v)).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Exp(x.0)))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| libm::log(v)).collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Ln(x.0)))
    }

    /// Elementwise max(x, floor). Subgradient 0 below the floor.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let data: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v < floor { floor } else { v })
            .collect();
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::ClampMin(x.0, floor)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s)?, Op::Sum(x.0)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, n) = (self.value(b).rows(), self.value(b).cols());
        if k != k2 {
            return Err(shape_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..m {
            for l in 0..k {
                let x = da[i * k + l];
                for j in 0..n {
                    out[i * n + j] += x * db[l * n + j];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0)))
    }

    /// `a * b^T` for row-major `a: [m, k]` and `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (n, k2) = (self.value(b).rows(), self.value(b).cols());
        if k != k2 {
            return Err(shape_err("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = crate::tensor::dot(&da[i * k..(i + 1) * k], &db[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a.0, b.0)))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = (self.value(w).rows(), self.value(w).cols());
        if self.value(x).rank() != 1 || self.value(x).len() != n {
            return Err(shape_err("matvec", self.value(w).shape(), self.value(x).shape()));
        }
        let (dw, dx) = (self.value(w).data(), self.value(x).data());
        let out: Vec<f64> = (0..m)
            .map(|i| crate::tensor::dot(&dw[i * n..(i + 1) * n], dx))
            .collect();
        Ok(self.push(Tensor::vector(out)?, Op::MatVec(w.0, x.0)))
    }

    /// Gather rows `indices` of a `[v, d]` table into an `[n, d]` matrix.
    pub fn embed_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("embed_rows"));
        }
        let (v, d) = (self.value(table).rows(), self.value(table).cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::UnknownItem(bad));
        }
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::EmbedRows(table.0, indices.to_vec()),
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = (self.value(a).rows(), self.value(a).cols());
        let (n2, q) = (self.value(b).rows(), self.value(b).cols());
        if n != n2 {
            return Err(shape_err("concat_cols", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * p..(i + 1) * p]);
            out.extend_from_slice(&self.value(b).data()[i * q..(i + 1) * q]);
        }
        Ok(self.push(Tensor::new(vec![n, p + q], out)?, Op::ConcatCols(a.0, b.0)))
    }

    pub fn concat_vec(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).rank() != 1 || self.value(b).rank() != 1 {
            return Err(shape_err("concat_vec", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        Ok(self.push(Tensor::vector(out)?, Op::ConcatVec(a.0, b.0)))
    }

    pub fn slice_vec(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if self.value(x).rank() != 1 || start + len > self.value(x).len() {
            return Err(shape_err("slice_vec", self.value(x).len(), start + len));
        }
        let out = self.value(x).data()[start..start + len].to_vec();
        Ok(self.push(Tensor::vector(out)?, Op::SliceVec(x.0, start, len)))
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        if r >= self.value(x).rows() {
            return Err(shape_err("row", self.value(x).rows(), r));
        }
        let out = self.value(x).row_slice(r).to_vec();
        Ok(self.push(Tensor::vector(out)?, Op::Row(x.0, r)))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        if n == 0 {
            return Err(Error::EmptyInput("mean_rows"));
        }
        let data = self.value(x).data();
        let mut out = vec![0.0; d];
        for i in 0..n {
            for c in 0..d {
                out[c] += data[i * d + c];
            }
        }
        for v in out.iter_mut() {
            *v /= n as f64;
        }
        Ok(self.push(Tensor::vector(out)?, Op::MeanRows(x.0)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = (self.value(x).rows(), self.value(x).cols());
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            out.extend_from_slice(&softmax(self.value(x).row_slice(i))?);
        }
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::SoftmaxRows(x.0)))
    }

    /// Scalar log-probability of `index` under the softmax of `logits`
    /// restricted to masked-in positions.
    pub fn masked_log_prob(&mut self, logits: Var, mask: &[bool], index: usize) -> Result<Var> {
        let lp = crate::tensor::masked_log_prob(self.value(logits).data(), mask, index)?;
        Ok(self.push(
            Tensor::scalar(lp)?,
            Op::MaskedLogProb {
                logits: logits.0,
                mask: mask.to_vec(),
                index,
            },
        ))
    }

    /// Scaled dot-product attention composed from tape primitives:
    /// `softmax(q k^T / sqrt(scale)) v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        if scale <= 0.0 {
            return Err(Error::InvalidArgument(alloc::string::String::from(
                "attention scale must be positive",
            )));
        }
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, 1.0 / libm::sqrt(scale))?;
        let weights = self.softmax_rows(scaled)?;
        self.matmul(weights, v)
    }

    /// Reverse pass from a scalar loss. Gradients of every parameter
    /// reachable from `loss` are accumulated into `store`; unreachable
    /// parameters are left untouched (exact zero if previously zeroed).
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err("backward loss", 1usize, self.nodes[loss.0].value.len()));
        }
        self.consumed = true;

        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            let g = core::mem::take(&mut grads[idx]);
            if g.iter().all(|&v| v == 0.0) {
                grads[idx] = g;
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (d, &gi) in grads[*a].iter_mut().zip(&g) {
                        *d += gi;
                    }
                    for (d, &gi) in grads[*b].iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::Sub(a, b) => {
                    for (d, &gi) in grads[*a].iter_mut().zip(&g) {
                        *d += gi;
                    }
                    for (d, &gi) in grads[*b].iter_mut().zip(&g) {
                        *d -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    for i in 0..g.len() {
                        grads[a][i] += g[i] * self.nodes[b].value.data()[i];
                    }
                    for i in 0..g.len() {
                        grads[b][i] += g[i] * self.nodes[a].value.data()[i];
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    for i in 0..g.len() {
                        let bv = self.nodes[b].value.data()[i];
                        grads[a][i] += g[i] / bv;
                        grads[b][i] -= g[i] * self.nodes[a].value.data()[i] / (bv * bv);
                    }
                }
                Op::Scale(x, s) => {
                    let (x, s) = (*x, *s);
                    for i in 0..g.len() {
                        grads[x][i] += g[i] * s;
                    }
                }
                Op::AddScalar(x, _) => {
                    for (d, &gi) in grads[*x].iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::Tanh(x) => {
                    let x = *x;
                    for i in 0..g.len() {
                        let y = self.nodes[idx].value.data()[i];
                        grads[x][i] += g[i] * (1.0 - y * y);
                    }
                }
                Op::Exp(x) => {
                    let x = *x;
                    for i in 0..g.len() {
                        grads[x][i] += g[i] * self.nodes[idx].value.data()[i];
                    }
                }
                Op::Ln(x) => {
                    let x = *x;
                    for i in 0..g.len() {
                        grads[x][i] += g[i] / self.nodes[x].value.data()[i];
                    }
                }
                Op::ClampMin(x, floor) => {
                    let (x, floor) = (*x, *floor);
                    for i in 0..g.len() {
                        if self.nodes[x].value.data()[i] >= floor {
                            grads[x][i] += g[i];
                        }
                    }
                }
                Op::Sum(x) => {
                    let x = *x;
                    for d in grads[x].iter_mut() {
                        *d += g[0];
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                    let n = self.nodes[b].value.cols();
                    // dA += G * B^T ; dB += A^T * G
                    for i in 0..m {
                        for l in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * self.nodes[b].value.data()[l * n + j];
                            }
                            grads[a][i * k + l] += s;
                        }
                    }
                    for l in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += self.nodes[a].value.data()[i * k + l] * g[i * n + j];
                            }
                            grads[b][l * n + j] += s;
                        }
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                    let n = self.nodes[b].value.rows();
                    // out = A B^T ; dA += G B ; dB += G^T A
                    for i in 0..m {
                        for l in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * self.nodes[b].value.data()[j * k + l];
                            }
                            grads[a][i * k + l] += s;
                        }
                    }
                    for j in 0..n {
                        for l in 0..k {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += g[i * n + j] * self.nodes[a].value.data()[i * k + l];
                            }
                            grads[b][j * k + l] += s;
                        }
                    }
                }
                Op::MatVec(w, x) => {
                    let (w, x) = (*w, *x);
                    let (m, n) = (self.nodes[w].value.rows(), self.nodes[w].value.cols());
                    for i in 0..m {
                        for j in 0..n {
                            grads[w][i * n + j] += g[i] * self.nodes[x].value.data()[j];
                        }
                    }
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += self.nodes[w].value.data()[i * n + j] * g[i];
                        }
                        grads[x][j] += s;
                    }
                }
                Op::EmbedRows(table, indices) => {
                    let table = *table;
                    let d = self.nodes[table].value.cols();
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..d {
                            grads[table][i * d + c] += g[r * d + c];
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let (n, p) = (self.nodes[a].value.rows(), self.nodes[a].value.cols());
                    let q = self.nodes[b].value.cols();
                    for i in 0..n {
                        for c in 0..p {
                            grads[a][i * p + c] += g[i * (p + q) + c];
                        }
                        for c in 0..q {
                            grads[b][i * q + c] += g[i * (p + q) + p + c];
                        }
                    }
                }
                Op::ConcatVec(a, b) => {
                    let (a, b) = (*a, *b);
                    let p = self.nodes[a].value.len();
                    for i in 0..p {
                        grads[a][i] += g[i];
                    }
                    for i in 0..self.nodes[b].value.len() {
                        grads[b][i] += g[p + i];
                    }
                }
                Op::SliceVec(x, start, len) => {
                    let (x, start, len) = (*x, *start, *len);
                    for i in 0..len {
                        grads[x][start + i] += g[i];
                    }
                }
                Op::Row(x, r) => {
                    let (x, r) = (*x, *r);
                    let d = self.nodes[x].value.cols();
                    for c in 0..d {
                        grads[x][r * d + c] += g[c];
                    }
                }
                Op::MeanRows(x) => {
                    let x = *x;
                    let (n, d) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                    let inv = 1.0 / n as f64;
                    for i in 0..n {
                        for c in 0..d {
                            grads[x][i * d + c] += g[c] * inv;
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let x = *x;
                    let (n, d) = (self.nodes[idx].value.rows(), self.nodes[idx].value.cols());
                    for i in 0..n {
                        let p = &self.nodes[idx].value.data()[i * d..(i + 1) * d];
                        let gi = &g[i * d..(i + 1) * d];
                        let dot: f64 = gi.iter().zip(p).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            grads[x][i * d + c] += p[c] * (gi[c] - dot);
                        }
                    }
                }
                Op::MaskedLogProb { logits, mask, index } => {
                    let logits = *logits;
                    let index = *index;
                    let p = crate::tensor::masked_softmax(self.nodes[logits].value.data(), mask)?;
                    for (j, &m) in mask.iter().enumerate() {
                        if m {
                            let delta = if j == index { 1.0 } else { 0.0 };
                            grads[logits][j] += g[0] * (delta - p[j]);
                        }
                    }
                }
            }
            grads[idx] = g;
        }

        for &(pid, node) in &self.param_nodes {
            store.accumulate_grad(pid, &grads[node]);
        }
        Ok(())
    }
}
