use std::cell::Cell;

use super::gemm::gemm;
use super::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Bucket that matmul multiply-accumulates are charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacTerm {
    QProj,
    KvProj,
    Score,
    Value,
    OProj,
    Other,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounts {
    pub q_proj: u64,
    pub kv_proj: u64,
    pub score: u64,
    pub value: u64,
    pub o_proj: u64,
    pub other: u64,
}

impl MacCounts {
    fn slot(&mut self, term: MacTerm) -> &mut u64 {
        match term {
            MacTerm::QProj => &mut self.q_proj,
            MacTerm::KvProj => &mut self.kv_proj,
            MacTerm::Score => &mut self.score,
            MacTerm::Value => &mut self.value,
            MacTerm::OProj => &mut self.o_proj,
            MacTerm::Other => &mut self.other,
        }
    }
}

/// Deliberate defects used to prove the check suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates both matmul input gradients.
    FlipMatmulBackward,
}

thread_local! {
    static FAULT: Cell<Option<Fault>> = const { Cell::new(None) };
}

/// Sets the fault picked up by graphs created afterwards on this thread.
#[doc(hidden)]
pub fn inject_fault(fault: Option<Fault>) {
    FAULT.with(|f| f.set(fault));
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    Transpose(Var),
    IndexSelect { x: Var, idx: Vec<usize> },
    IndexAdd { dest: Var, idx: Vec<usize>, src: Var },
    GatherElems { x: Var, pos: Vec<(usize, usize)> },
    ScaleRows { x: Var, s: Var },
    SelectCols { x: Var, cols: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumRows(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    CvSquared(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only tape of tensor ops. Node order is a topological order.
pub struct Graph {
    nodes: Vec<Node>,
    macs: MacCounts,
    mac_term: MacTerm,
    fault: Option<Fault>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn is_matrix(t: &Tensor) -> bool {
    t.rank() == 2
}

/// `Some(false)` for identical shapes, `Some(true)` when `b` is a row that
/// broadcasts over the leading dimension of matrix `a`.
fn broadcast(a: &Tensor, b: &Tensor) -> Option<bool> {
    if a.shape() == b.shape() {
        Some(false)
    } else if is_matrix(a)
        && ((b.rank() == 1 && b.shape()[0] == a.cols())
            || (is_matrix(b) && b.rows() == 1 && b.cols() == a.cols()))
    {
        Some(true)
    } else {
        None
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn column_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in g.chunks_exact(cols) {
        add_into(&mut out, row);
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    dst.iter_mut().for_each(|d| *d /= total);
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: MacCounts::default(),
            mac_term: MacTerm::Other,
            fault: FAULT.with(Cell::get),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn macs(&self) -> MacCounts {
        self.macs
    }

    /// Routes subsequent matmul MACs to `term`; returns the previous term.
    pub fn set_mac_term(&mut self, term: MacTerm) -> MacTerm {
        std::mem::replace(&mut self.mac_term, term)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_with(value, op, needs_grad)
    }

    fn push_with(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.grad = None;
        value.requires_grad = false;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Gradients are only tracked when `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push_with(t, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_with(t, Op::Leaf, false)
    }

    /// Records a tensor as a differentiable input regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_with(t.clone(), Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_matrix(ta) || !is_matrix(tb) || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        *self.macs.slot(self.mac_term) += (m * k * n) as u64;
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_broadcast(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bcast = broadcast(ta, tb).ok_or_else(|| shape_err(op, ta, tb))?;
        let bd = tb.data();
        let n = bd.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(o, &x)| f(x, if bcast { bd[o % n] } else { bd[o] }))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may be a row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_broadcast("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product; `b` may be a row broadcast over `a`'s rows.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_broadcast("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(x, c), &[x])
    }

    /// Elementwise `1 / x`.
    pub fn recip(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| 1.0 / v);
        self.push(t, Op::Recip(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        Tensor::new(src.shape().to_vec(), data).expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let src = self.value(x);
        if !is_matrix(src) {
            return Err(shape_err("layer_norm", src, src));
        }
        let n = src.cols();
        let mut data = Vec::with_capacity(src.numel());
        let mut inv_std = Vec::with_capacity(src.rows());
        for row in src.data().chunks_exact(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            data.extend(row.iter().map(|v| (v - mu) * is));
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(t, Op::LayerNorm { x, inv_std }, &[x]))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if !is_matrix(src) {
            return Err(shape_err("softmax_rows", src, src));
        }
        let n = src.cols();
        let mut data = vec![0.0; src.numel()];
        for (s, d) in src.data().chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            softmax_row(s, d);
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if !is_matrix(src) {
            return Err(shape_err("transpose", src, src));
        }
        let (m, n) = (src.rows(), src.cols());
        let d = src.data();
        let data = (0..m * n).map(|o| d[(o % m) * n + o / m]).collect();
        let t = Tensor::new(vec![n, m], data)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    fn check_indices(op: &'static str, idx: &[usize], extent: usize) -> Result<()> {
        match idx.iter().find(|&&i| i >= extent) {
            Some(&index) => Err(Error::Index { op, index, extent }),
            None => Ok(()),
        }
    }

    /// Gathers rows (leading-dimension slices) in the order given.
    pub fn index_select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x);
        Self::check_indices("index_select", idx, src.rows())?;
        let w = src.numel() / src.rows();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&src.data()[i * w..(i + 1) * w]);
        }
        let mut shape = src.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = idx.len();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::IndexSelect {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// `dest` with row `idx[t]` incremented by row `t` of `src`; duplicates sum.
    pub fn index_add(&mut self, dest: Var, idx: &[usize], src: Var) -> Result<Var> {
        let (td, ts) = (self.value(dest), self.value(src));
        let w = td.numel() / td.rows();
        if ts.rows() != idx.len() || ts.numel() / ts.rows() != w {
            return Err(shape_err("index_add", td, ts));
        }
        Self::check_indices("index_add", idx, td.rows())?;
        let mut data = td.data().to_vec();
        for (t, &i) in idx.iter().enumerate() {
            add_into(&mut data[i * w..(i + 1) * w], &ts.data()[t * w..(t + 1) * w]);
        }
        let t = Tensor::new(td.shape().to_vec(), data)?;
        Ok(self.push(
            t,
            Op::IndexAdd {
                dest,
                idx: idx.to_vec(),
                src,
            },
            &[dest, src],
        ))
    }

    /// Picks individual `(row, col)` entries of a matrix into a vector.
    pub fn gather_elems(&mut self, x: Var, pos: &[(usize, usize)]) -> Result<Var> {
        let src = self.value(x);
        if !is_matrix(src) {
            return Err(shape_err("gather_elems", src, src));
        }
        let (m, n) = (src.rows(), src.cols());
        let mut data = Vec::with_capacity(pos.len());
        for &(r, c) in pos {
            if r >= m {
                return Err(Error::Index {
                    op: "gather_elems",
                    index: r,
                    extent: m,
                });
            }
            if c >= n {
                return Err(Error::Index {
                    op: "gather_elems",
                    index: c,
                    extent: n,
                });
            }
            data.push(src.data()[r * n + c]);
        }
        let t = Tensor::vector(data)?;
        Ok(self.push(
            t,
            Op::GatherElems {
                x,
                pos: pos.to_vec(),
            },
            &[x],
        ))
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if !is_matrix(tx) || ts.rank() != 1 || ts.numel() != tx.rows() {
            return Err(shape_err("scale_rows", tx, ts));
        }
        let n = tx.cols();
        let sd = ts.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(o, v)| v * sd[o / n])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::ScaleRows { x, s }, &[x, s]))
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if !is_matrix(src) {
            return Err(shape_err("select_cols", src, src));
        }
        let n = src.cols();
        Self::check_indices("select_cols", cols, n)?;
        let mut data = Vec::with_capacity(src.rows() * cols.len());
        for row in src.data().chunks_exact(n) {
            data.extend(cols.iter().map(|&c| row[c]));
        }
        let t = Tensor::new(vec![src.rows(), cols.len()], data)?;
        Ok(self.push(
            t,
            Op::SelectCols {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        ))
    }

    /// Contiguous column range `[start, start + len)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let cols: Vec<usize> = (start..start + len).collect();
        self.select_cols(x, &cols)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| {
            Error::Contract("concat_cols of zero tensors".into())
        })?);
        let m = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if !is_matrix(t) || t.rows() != m {
                return Err(shape_err("concat_cols", first, t));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| {
            Error::Contract("concat_rows of zero tensors".into())
        })?);
        let n = first.cols();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            if !is_matrix(t) || t.cols() != n {
                return Err(shape_err("concat_rows", first, t));
            }
            m += t.rows();
        }
        let mut data = Vec::with_capacity(m * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Column sums of a matrix, as a vector.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        if !is_matrix(src) {
            return Err(shape_err("sum_rows", src, src));
        }
        let t = Tensor::vector(column_sums(src.data(), src.cols()))?;
        Ok(self.push(t, Op::SumRows(x), &[x]))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let src = self.value(logits);
        if !is_matrix(src) || src.rows() != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: src.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = src.cols();
        Self::check_indices("cross_entropy", labels, c)?;
        let mut probs = vec![0.0; src.numel()];
        let mut loss = 0.0;
        for ((row, p), &y) in src.data().chunks_exact(c).zip(probs.chunks_exact_mut(c)).zip(labels) {
            softmax_row(row, p);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Squared coefficient of variation `var / mean²` (population variance).
    /// Defined as 0 when the mean is 0.
    pub fn cv_squared(&mut self, x: Var) -> Var {
        let v = cv_squared(self.value(x).data());
        self.push(Tensor::scalar(v), Op::CvSquared(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let beta = 1.0;
                let sign = if self.fault == Some(Fault::FlipMatmulBackward) {
                    -1.0
                } else {
                    1.0
                };
                acc(*a, &mut |da| {
                    if sign > 0.0 {
                        gemm(m, n, k, g, false, tb.data(), true, da, beta);
                    } else {
                        let mut tmp = vec![0.0; m * k];
                        gemm(m, n, k, g, false, tb.data(), true, &mut tmp, 0.0);
                        da.iter_mut().zip(&tmp).for_each(|(d, t)| *d -= t);
                    }
                });
                acc(*b, &mut |db| {
                    if sign > 0.0 {
                        gemm(k, m, n, ta.data(), true, g, false, db, beta);
                    } else {
                        let mut tmp = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, g, false, &mut tmp, 0.0);
                        db.iter_mut().zip(&tmp).for_each(|(d, t)| *d -= t);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                let bcast = self.value(*b).numel() != g.len();
                acc(*b, &mut |db| {
                    if bcast {
                        add_into(db, &column_sums(g, db.len()));
                    } else {
                        add_into(db, g);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let nb = tb.numel();
                let bcast = nb != g.len();
                acc(*a, &mut |da| {
                    for (o, d) in da.iter_mut().enumerate() {
                        *d += g[o] * tb.data()[if bcast { o % nb } else { o }];
                    }
                });
                acc(*b, &mut |db| {
                    for (o, (&go, &av)) in g.iter().zip(ta.data()).enumerate() {
                        db[if bcast { o % nb } else { o }] += go * av;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |dx| {
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv)
            }),
            Op::Recip(x) => acc(*x, &mut |dx| {
                for ((d, &y), &gv) in dx.iter_mut().zip(out.data()).zip(g) {
                    *d -= gv * y * y;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => acc(*x, &mut |dx| {
                let s = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += s)
            }),
            Op::Relu(x) => {
                let tx = self.value(*x);
                acc(*x, &mut |dx| {
                    for ((d, &v), &gv) in dx.iter_mut().zip(tx.data()).zip(g) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                })
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                acc(*x, &mut |dx| {
                    for ((d, &v), &gv) in dx.iter_mut().zip(tx.data()).zip(g) {
                        *d += gv * gelu_grad(v);
                    }
                })
            }
            Op::LayerNorm { x, inv_std } => {
                let n = out.cols();
                acc(*x, &mut |dx| {
                    for (r, ((dr, yr), gr)) in dx
                        .chunks_exact_mut(n)
                        .zip(out.data().chunks_exact(n))
                        .zip(g.chunks_exact(n))
                        .enumerate()
                    {
                        let gm = gr.iter().sum::<f64>() / n as f64;
                        let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((d, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += inv_std[r] * (gv - gm - y * gy);
                        }
                    }
                })
            }
            Op::Softmax(x) => {
                let n = out.cols();
                acc(*x, &mut |dx| {
                    for ((dr, yr), gr) in dx
                        .chunks_exact_mut(n)
                        .zip(out.data().chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += y * (gv - dot);
                        }
                    }
                })
            }
            Op::Transpose(x) => {
                // out is n×m, input m×n
                let (n, m) = (out.rows(), out.cols());
                acc(*x, &mut |dx| {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                })
            }
            Op::IndexSelect { x, idx } => {
                let w = out.numel() / out.rows();
                acc(*x, &mut |dx| {
                    for (t, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * w..(i + 1) * w], &g[t * w..(t + 1) * w]);
                    }
                })
            }
            Op::IndexAdd { dest, idx, src } => {
                let w = out.numel() / out.rows();
                acc(*dest, &mut |dd| add_into(dd, g));
                acc(*src, &mut |ds| {
                    for (t, &i) in idx.iter().enumerate() {
                        add_into(&mut ds[t * w..(t + 1) * w], &g[i * w..(i + 1) * w]);
                    }
                })
            }
            Op::GatherElems { x, pos } => {
                let n = self.value(*x).cols();
                acc(*x, &mut |dx| {
                    for (t, &(r, c)) in pos.iter().enumerate() {
                        dx[r * n + c] += g[t];
                    }
                })
            }
            Op::ScaleRows { x, s } => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let n = tx.cols();
                acc(*x, &mut |dx| {
                    for (o, d) in dx.iter_mut().enumerate() {
                        *d += g[o] * ts.data()[o / n];
                    }
                });
                acc(*s, &mut |dsv| {
                    for (i, d) in dsv.iter_mut().enumerate() {
                        *d += g[i * n..(i + 1) * n]
                            .iter()
                            .zip(tx.row(i))
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                })
            }
            Op::SelectCols { x, cols } => {
                let n = self.value(*x).cols();
                let w = cols.len();
                acc(*x, &mut |dx| {
                    for (dr, gr) in dx.chunks_exact_mut(n).zip(g.chunks_exact(w)) {
                        for (t, &c) in cols.iter().enumerate() {
                            dr[c] += gr[t];
                        }
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |dp| {
                        for (dr, gr) in dp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            add_into(dr, &gr[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    acc(p, &mut |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SumRows(x) => {
                let n = g.len();
                acc(*x, &mut |dx| {
                    for dr in dx.chunks_exact_mut(n) {
                        add_into(dr, g);
                    }
                })
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |dl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                })
            }
            Op::CvSquared(x) => {
                let xs = self.value(*x).data();
                let n = xs.len() as f64;
                let mu = xs.iter().sum::<f64>() / n;
                if mu == 0.0 {
                    return;
                }
                let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                acc(*x, &mut |dx| {
                    for (d, &v) in dx.iter_mut().zip(xs) {
                        *d += g[0]
                            * (2.0 * (v - mu) / (n * mu * mu) - 2.0 * var / (n * mu * mu * mu));
                    }
                })
            }
        }
    }
}

/// Population `var / mean²`; 0 for a zero mean.
pub fn cv_squared(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    if mu == 0.0 {
        return 0.0;
    }
    let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    var / (mu * mu)
}

/// Adjoints produced by [`Graph::backward`], retained for leaf nodes only.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a leaf, or `None` if it did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.wrt(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }
}
