//! Define-by-run reverse-mode differentiation over 2D tensors.
//!
//! A [`Graph`] records every operation as it is applied. `backward` walks the
//! tape in reverse and accumulates gradients for every parameter reachable
//! from the loss. All reductions run in a fixed order.

use std::ops::Range;

use super::mol::mol_nll_with_grad;
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::gemm;
use super::{DiffError, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Shape bookkeeping for a 2D convolution over channel-major images stored
/// one per row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<(Range<usize>, Range<usize>)>, probs: Vec<f64> },
    Gather { table: Var, indices: Vec<usize> },
    ConcatCols(Vec<Var>),
    GatherRows(Vec<(Var, usize)>),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Tensor },
    MolNll { params: Var, grad: Tensor },
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn shape_err(msg: impl Into<String>) -> DiffError {
    DiffError::Shape(msg.into())
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward value");
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err(format!("matmul {:?} x {:?}", ta.shape(), tb.shape())));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        gemm(ta.data(), ta.rows(), ta.cols(), false, tb.data(), tb.rows(), tb.cols(), false, out.data_mut(), 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(shape_err(format!("add_row {:?} + {:?}", tx.shape(), tb.shape())));
        }
        let mut out = tx.clone();
        let b = tb.data().to_vec();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("elementwise {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.elementwise(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.elementwise(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|v| v * k).collect()).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let out = Tensor::from_vec(t.rows(), t.cols(), data).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|v| v.tanh()).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (both `[1, n]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, DiffError> {
        let tx = self.value(x);
        let n = tx.cols();
        if self.value(gamma).shape() != [1, n] || self.value(beta).shape() != [1, n] {
            return Err(shape_err("layer_norm affine shape"));
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = Tensor::zeros(tx.rows(), n);
        let mut out = Tensor::zeros(tx.rows(), n);
        let mut inv_std = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let xr = xhat.row_mut(r);
            for c in 0..n {
                xr[c] = (row[c] - mean) * is;
            }
            let or = out.row_mut(r);
            for c in 0..n {
                or[c] = xhat.get(r, c) * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = Tensor::zeros(t.rows(), t.cols());
        for r in 0..t.rows() {
            softmax_into(t.row(r), out.row_mut(r));
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Multi-head scaled dot-product attention. Each `(query_rows,
    /// key_rows)` segment attends only within itself; rows of `q` outside
    /// every segment produce zeros. Inputs are already projected; heads split
    /// the feature dimension evenly.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<(Range<usize>, Range<usize>)>,
    ) -> Result<Var, DiffError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(format!("model dim {d} not divisible by {heads} heads")));
        }
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(shape_err("attention q/k/v shapes"));
        }
        for (qr, kr) in &segments {
            if qr.end > tq.rows() || kr.end > tk.rows() || (kr.is_empty() && !qr.is_empty()) {
                return Err(shape_err("attention segment out of range"));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(tq.rows(), d);
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for (qr, kr) in &segments {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in qr.clone() {
                    let qi = &tq.row(i)[cols.clone()];
                    scores.clear();
                    for j in kr.clone() {
                        let kj = &tk.row(j)[cols.clone()];
                        scores.push(dot(qi, kj) * scale);
                    }
                    let start = probs.len();
                    probs.resize(start + scores.len(), 0.0);
                    softmax_into(&scores, &mut probs[start..]);
                    let orow = &mut out.row_mut(i)[cols.clone()];
                    for (jj, j) in kr.clone().enumerate() {
                        let p = probs[start + jj];
                        let vj = &tv.row(j)[cols.clone()];
                        for c in 0..dh {
                            orow[c] += p * vj[c];
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, heads, segments, probs }, rg))
    }

    /// Embedding lookup: row `i` of the output is `table[indices[i]]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(table);
        let mut out = Tensor::zeros(indices.len(), t.cols());
        for (r, &i) in indices.iter().enumerate() {
            if i >= t.rows() {
                return Err(DiffError::IndexOutOfRange { index: i, len: t.rows() });
            }
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        Ok(self.push(out, Op::Gather { table, indices: indices.to_vec() }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(shape_err("concat_cols row mismatch"));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Assemble a tensor row by row from rows of other tensors.
    pub fn gather_rows(&mut self, sources: &[(Var, usize)]) -> Result<Var, DiffError> {
        if sources.is_empty() {
            return Err(shape_err("gather_rows with no rows"));
        }
        let cols = self.value(sources[0].0).cols();
        let mut out = Tensor::zeros(sources.len(), cols);
        for (r, (v, i)) in sources.iter().enumerate() {
            let t = self.value(*v);
            if t.cols() != cols {
                return Err(shape_err("gather_rows column mismatch"));
            }
            if *i >= t.rows() {
                return Err(DiffError::IndexOutOfRange { index: *i, len: t.rows() });
            }
            out.row_mut(r).copy_from_slice(t.row(*i));
        }
        let rg = sources.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(out, Op::GatherRows(sources.to_vec()), rg))
    }

    /// 2D convolution. `x` holds one channel-major image per row, `w` is
    /// `[out_channels, in_channels * k * k]`, `b` is `[1, out_channels]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var, DiffError> {
        let tx = self.value(x);
        if tx.cols() != geom.in_len() {
            return Err(shape_err(format!("conv2d input has {} values, expected {}", tx.cols(), geom.in_len())));
        }
        if self.value(w).shape() != [geom.out_channels, geom.patch_len()] || self.value(b).shape() != [1, geom.out_channels]
        {
            return Err(shape_err("conv2d weight shape"));
        }
        let batch = tx.rows();
        let out_hw = geom.out_height() * geom.out_width();
        let patch = geom.patch_len();
        let mut cols = vec![0.0; batch * patch * out_hw];
        let mut out = Tensor::zeros(batch, geom.out_len());
        let wt = self.value(w);
        let bias = self.value(b).data().to_vec();
        for n in 0..batch {
            let col = &mut cols[n * patch * out_hw..(n + 1) * patch * out_hw];
            im2col(tx.row(n), &geom, col);
            let orow = out.row_mut(n);
            gemm(wt.data(), geom.out_channels, patch, false, col, patch, out_hw, false, orow, 0.0);
            for c in 0..geom.out_channels {
                for v in &mut orow[c * out_hw..(c + 1) * out_hw] {
                    *v += bias[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Per-row negative log-softmax at the target index; `[rows, 1]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(logits);
        if targets.len() != t.rows() {
            return Err(shape_err("cross_entropy target count"));
        }
        let mut probs = Tensor::zeros(t.rows(), t.cols());
        let mut out = Tensor::zeros(t.rows(), 1);
        for r in 0..t.rows() {
            if targets[r] >= t.cols() {
                return Err(DiffError::IndexOutOfRange { index: targets[r], len: t.cols() });
            }
            softmax_into(t.row(r), probs.row_mut(r));
            let row = t.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            out.row_mut(r)[0] = lse - row[targets[r]];
        }
        let rg = self.rg(logits);
        Ok(self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg))
    }

    /// Per-row discretized mixture-of-logistics NLL, summed over the
    /// `targets.cols()` scalars of each row. `params` is
    /// `[rows, targets.cols() * 3K]`, each scalar's block laid out as
    /// `[logits | means | log_scales]`. Returns `[rows, 1]`.
    pub fn mol_nll(&mut self, params: Var, targets: &Tensor, bin_width: f64) -> Result<Var, DiffError> {
        let t = self.value(params);
        let dims = targets.cols();
        if targets.rows() != t.rows() || dims == 0 || t.cols() % (3 * dims) != 0 {
            return Err(shape_err(format!("mol_nll params {:?} targets {:?}", t.shape(), targets.shape())));
        }
        let block = t.cols() / dims;
        let mut grad = Tensor::zeros(t.rows(), t.cols());
        let mut out = Tensor::zeros(t.rows(), 1);
        for r in 0..t.rows() {
            let mut nll = 0.0;
            for d in 0..dims {
                let packed = &t.row(r)[d * block..(d + 1) * block];
                let g = &mut grad.row_mut(r)[d * block..(d + 1) * block];
                nll += mol_nll_with_grad(packed, targets.get(r, d), bin_width, Some(g));
            }
            out.row_mut(r)[0] = nll;
        }
        let rg = self.rg(params);
        Ok(self.push(out, Op::MolNll { params, grad }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if self.value(loss).shape() != [1, 1] {
            return Err(shape_err("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = self.params.zero_grads();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads, &mut out);
        }
        debug_assert!(out.all_finite(), "non-finite gradient");
        Ok(out)
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => out.get_mut(*id).add_assign(dy),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let g = self.grad_buf(grads, *a);
                    gemm(dy.data(), dy.rows(), dy.cols(), false, tb.data(), tb.rows(), tb.cols(), true, g.data_mut(), 1.0);
                }
                if self.rg(*b) {
                    let g = self.grad_buf(grads, *b);
                    gemm(ta.data(), ta.rows(), ta.cols(), true, dy.data(), dy.rows(), dy.cols(), false, g.data_mut(), 1.0);
                }
            }
            Op::AddRow(x, bias) => {
                if self.rg(*x) {
                    self.grad_buf(grads, *x).add_assign(dy);
                }
                if self.rg(*bias) {
                    let g = self.grad_buf(grads, *bias);
                    for r in 0..dy.rows() {
                        for (gv, d) in g.data_mut().iter_mut().zip(dy.row(r)) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        self.grad_buf(grads, v).add_assign(dy);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).clone(), self.value(*b).clone());
                if self.rg(*a) {
                    let g = self.grad_buf(grads, *a);
                    for ((gv, d), o) in g.data_mut().iter_mut().zip(dy.data()).zip(tb.data()) {
                        *gv += d * o;
                    }
                }
                if self.rg(*b) {
                    let g = self.grad_buf(grads, *b);
                    for ((gv, d), o) in g.data_mut().iter_mut().zip(dy.data()).zip(ta.data()) {
                        *gv += d * o;
                    }
                }
            }
            Op::Scale(a, k) => {
                let g = self.grad_buf(grads, *a);
                for (gv, d) in g.data_mut().iter_mut().zip(dy.data()) {
                    *gv += d * k;
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).clone();
                let g = self.grad_buf(grads, *x);
                for ((gv, d), &v) in g.data_mut().iter_mut().zip(dy.data()).zip(tx.data()) {
                    let u = GELU_C * (v + 0.044715 * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    *gv += d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            }
            Op::Tanh(x) => {
                let y = self.node_value(node).clone();
                let g = self.grad_buf(grads, *x);
                for ((gv, d), yv) in g.data_mut().iter_mut().zip(dy.data()).zip(y.data()) {
                    *gv += d * (1.0 - yv * yv);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = xhat.cols();
                let gam = self.value(*gamma).data().to_vec();
                if self.rg(*gamma) {
                    let g = self.grad_buf(grads, *gamma);
                    for r in 0..dy.rows() {
                        for c in 0..n {
                            g.data_mut()[c] += dy.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                if self.rg(*beta) {
                    let g = self.grad_buf(grads, *beta);
                    for r in 0..dy.rows() {
                        for c in 0..n {
                            g.data_mut()[c] += dy.get(r, c);
                        }
                    }
                }
                if self.rg(*x) {
                    let g = self.grad_buf(grads, *x);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..dy.rows() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            dxhat[c] = dy.get(r, c) * gam[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xhat.get(r, c);
                        }
                        let gr = g.row_mut(r);
                        for c in 0..n {
                            gr[c] += inv_std[r] / n as f64 * (n as f64 * dxhat[c] - s1 - xhat.get(r, c) * s2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = self.node_value(node).clone();
                let g = self.grad_buf(grads, *x);
                for r in 0..y.rows() {
                    let dot_r: f64 = dy.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    let gr = g.row_mut(r);
                    for c in 0..y.cols() {
                        gr[c] += y.get(r, c) * (dy.get(r, c) - dot_r);
                    }
                }
            }
            Op::Attention { q, k, v, heads, segments, probs } => {
                self.attention_backward(*q, *k, *v, *heads, segments, probs, dy, grads);
            }
            Op::Gather { table, indices } => {
                let g = self.grad_buf(grads, *table);
                for (r, &i) in indices.iter().enumerate() {
                    for (gv, d) in g.row_mut(i).iter_mut().zip(dy.row(r)) {
                        *gv += d;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.rg(*p) {
                        let g = self.grad_buf(grads, *p);
                        for r in 0..dy.rows() {
                            for (gv, d) in g.row_mut(r).iter_mut().zip(&dy.row(r)[off..off + w]) {
                                *gv += d;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows(sources) => {
                for (r, (v, i)) in sources.iter().enumerate() {
                    if self.rg(*v) {
                        let g = self.grad_buf(grads, *v);
                        for (gv, d) in g.row_mut(*i).iter_mut().zip(dy.row(r)) {
                            *gv += d;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let out_hw = geom.out_height() * geom.out_width();
                let patch = geom.patch_len();
                let wt = self.value(*w).clone();
                if self.rg(*w) {
                    let g = self.grad_buf(grads, *w);
                    for n in 0..dy.rows() {
                        let col = &cols[n * patch * out_hw..(n + 1) * patch * out_hw];
                        gemm(dy.row(n), geom.out_channels, out_hw, false, col, patch, out_hw, true, g.data_mut(), 1.0);
                    }
                }
                if self.rg(*b) {
                    let g = self.grad_buf(grads, *b);
                    for n in 0..dy.rows() {
                        let row = dy.row(n);
                        for c in 0..geom.out_channels {
                            g.data_mut()[c] += row[c * out_hw..(c + 1) * out_hw].iter().sum::<f64>();
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dcol = vec![0.0; patch * out_hw];
                    let g = self.grad_buf(grads, *x);
                    for n in 0..dy.rows() {
                        gemm(wt.data(), geom.out_channels, patch, true, dy.row(n), geom.out_channels, out_hw, false, &mut dcol, 0.0);
                        col2im_add(&dcol, geom, g.row_mut(n));
                    }
                }
            }
            Op::Sum(x) => {
                let d = dy.item();
                for v in self.grad_buf(grads, *x).data_mut() {
                    *v += d;
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                let d = dy.item() / n;
                for v in self.grad_buf(grads, *x).data_mut() {
                    *v += d;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let g = self.grad_buf(grads, *logits);
                for r in 0..probs.rows() {
                    let d = dy.get(r, 0);
                    let gr = g.row_mut(r);
                    for c in 0..probs.cols() {
                        let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                        gr[c] += d * (probs.get(r, c) - onehot);
                    }
                }
            }
            Op::MolNll { params, grad } => {
                let g = self.grad_buf(grads, *params);
                for r in 0..grad.rows() {
                    let d = dy.get(r, 0);
                    for (gv, pg) in g.row_mut(r).iter_mut().zip(grad.row(r)) {
                        *gv += d * pg;
                    }
                }
            }
        }
    }

    fn node_value<'a>(&'a self, node: &'a Node) -> &'a Tensor {
        match &node.value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let [r, c] = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[(Range<usize>, Range<usize>)],
        probs: &[f64],
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(tq.rows(), d);
        let mut dk = Tensor::zeros(tk.rows(), d);
        let mut dv = Tensor::zeros(tv.rows(), d);
        let mut offset = 0;
        let mut dp = Vec::new();
        for (qr, kr) in segments {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in qr.clone() {
                    let p = &probs[offset..offset + kr.len()];
                    offset += kr.len();
                    let dyi = &dy.row(i)[cols.clone()];
                    dp.clear();
                    for (jj, j) in kr.clone().enumerate() {
                        let vj = &tv.row(j)[cols.clone()];
                        dp.push(dot(dyi, vj));
                        let dvj = &mut dv.row_mut(j)[cols.clone()];
                        for c in 0..dh {
                            dvj[c] += p[jj] * dyi[c];
                        }
                    }
                    let pd: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qi = tq.row(i)[cols.clone()].to_vec();
                    for (jj, j) in kr.clone().enumerate() {
                        let ds = p[jj] * (dp[jj] - pd) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &tk.row(j)[cols.clone()];
                        let dqi = &mut dq.row_mut(i)[cols.clone()];
                        for c in 0..dh {
                            dqi[c] += ds * kj[c];
                        }
                        let dkj = &mut dk.row_mut(j)[cols.clone()];
                        for c in 0..dh {
                            dkj[c] += ds * qi[c];
                        }
                    }
                }
            }
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if self.rg(var) {
                self.grad_buf(grads, var).add_assign(&g);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let out_hw = oh * ow;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[row * out_hw..(row + 1) * out_hw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.height && (ix as usize) < g.width {
                            img[(c * g.height + iy as usize) * g.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let out_hw = oh * ow;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &col[row * out_hw..(row + 1) * out_hw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            img[(c * g.height + iy as usize) * g.width + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
