//! Reverse-mode autodiff over a flat tape of tensor ops.
//!
//! A [`Graph`] borrows a [`ParamSet`], records forward ops as nodes, and
//! replays the tape backwards to accumulate parameter gradients. The op set
//! is exactly what the encoder/decoder stack and the loss heads need; every
//! op is smooth (GELU-tanh, layer norm, softmax) so central finite
//! differences agree with the analytic gradients to high precision.

use crate::error::{Error, Result};
use crate::nn::params::ParamSet;
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a[m,n] + row[1,n]` broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    /// Row gather; indices may repeat (embedding lookups).
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Gelu(NodeId),
    Sum(NodeId),
    MeanRows(NodeId),
    L2NormalizeRows(NodeId),
    /// Gather scalars at (row, col) into a 1 x k vector.
    PickScalars(NodeId, Vec<(usize, usize)>),
    /// log(sum(exp(x))) over a 1 x n row, max-shifted.
    LogSumExpRow(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by parameter index in the originating [`ParamSet`].
pub struct Grads {
    pub by_param: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, idx: usize) -> Option<&Tensor> {
        self.by_param.get(idx).and_then(|g| g.as_ref())
    }
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    pub fn scalar_input(&mut self, v: f64) -> NodeId {
        self.input(Tensor::scalar(v))
    }

    /// Leaf node for a named parameter; repeated calls share one node so
    /// gradients accumulate correctly.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let idx = self.params.index_of(name)?;
        if let Some(id) = self.param_nodes[idx] {
            return Ok(id);
        }
        let id = self.push(self.params.tensor(idx).clone(), Op::Param(idx));
        self.param_nodes[idx] = Some(id);
        Ok(id)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_in_place(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data
            .iter()
            .zip(vb.data.iter())
            .map(|(x, y)| x - y)
            .collect();
        let v = Tensor {
            rows: va.rows,
            cols: va.cols,
            data,
        };
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data
            .iter()
            .zip(vb.data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor {
            rows: va.rows,
            cols: va.cols,
            data,
        };
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(Error::Shape(format!(
                "add_row: {:?} + {:?}",
                (m, n),
                self.shape(row)
            )));
        }
        let mut v = self.value(a).clone();
        let r = self.value(row).data.clone();
        for i in 0..m {
            for (x, y) in v.row_mut(i).iter_mut().zip(r.iter()) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_in_place(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            *x += s;
        }
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let mut v = Tensor::zeros(idx.len(), n);
        for (r, &i) in idx.iter().enumerate() {
            if i >= m {
                return Err(Error::Shape(format!("gather_rows: row {i} out of {m}")));
            }
            v.row_mut(r).copy_from_slice(self.value(a).row(i));
        }
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of nothing".into()));
        }
        let n = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = self.shape(p);
            if c != n {
                return Err(Error::Shape(format!("concat_rows: cols {c} vs {n}")));
            }
            data.extend_from_slice(&self.value(p).data);
            rows += m;
        }
        Ok(self.push(
            Tensor {
                rows,
                cols: n,
                data,
            },
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if start >= end || end > n {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {n}")));
        }
        let mut v = Tensor::zeros(m, end - start);
        for i in 0..m {
            v.row_mut(i)
                .copy_from_slice(&self.value(a).row(i)[start..end]);
        }
        Ok(self.push(v, Op::SliceCols(a, start, end)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of nothing".into()));
        }
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Tensor::zeros(m, total);
        let mut off = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pm != m {
                return Err(Error::Shape(format!("concat_cols: rows {pm} vs {m}")));
            }
            for i in 0..m {
                v.row_mut(i)[off..off + pn].copy_from_slice(self.value(p).row(i));
            }
            off += pn;
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut v = src.clone();
        for i in 0..v.rows {
            softmax_in_place(v.row_mut(i));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut v = src.clone();
        for i in 0..v.rows {
            log_softmax_in_place(v.row_mut(i));
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        if self.shape(gain) != (1, n) || self.shape(bias) != (1, n) {
            return Err(Error::Shape("layer_norm gain/bias shape".into()));
        }
        let mut v = Tensor::zeros(m, n);
        for i in 0..m {
            let row = self.value(x).row(i);
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            let g = self.value(gain).row(0);
            let b = self.value(bias).row(0);
            for j in 0..n {
                v.set(i, j, (row[j] - mean) * inv * g[j] + b[j]);
            }
        }
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            *x = gelu(*x);
        }
        self.push(v, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut v = Tensor::zeros(1, n);
        for i in 0..m {
            for (o, x) in v.row_mut(0).iter_mut().zip(self.value(a).row(i)) {
                *o += x;
            }
        }
        // borrow of self.value(a) released above; rescale separately
        v.scale_in_place(1.0 / m as f64);
        self.push(v, Op::MeanRows(a))
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let src = self.value(a);
        let mut v = src.clone();
        for i in 0..v.rows {
            let row = v.row_mut(i);
            let n = crate::nn::tensor::norm(row);
            if n == 0.0 {
                return Err(Error::Numeric("l2_normalize of zero row".into()));
            }
            for x in row {
                *x /= n;
            }
        }
        Ok(self.push(v, Op::L2NormalizeRows(a)))
    }

    pub fn pick_scalars(&mut self, a: NodeId, picks: &[(usize, usize)]) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let mut v = Tensor::zeros(1, picks.len());
        for (k, &(r, c)) in picks.iter().enumerate() {
            if r >= m || c >= n {
                return Err(Error::Shape(format!("pick ({r},{c}) out of {m}x{n}")));
            }
            v.set(0, k, self.value(a).at(r, c));
        }
        Ok(self.push(v, Op::PickScalars(a, picks.to_vec())))
    }

    pub fn logsumexp_row(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, _) = self.shape(a);
        if m != 1 {
            return Err(Error::Shape("logsumexp_row expects 1 x n".into()));
        }
        let row = self.value(a).row(0);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let v = Tensor::scalar(max + s.ln());
        Ok(self.push(v, Op::LogSumExpRow(a)))
    }

    /// Accumulate gradients of a scalar loss into every reachable parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Grads> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape("backward from non-scalar".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut by_param: Vec<Option<Tensor>> = vec![None; self.params.len()];

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(idx) => {
                    accumulate(&mut by_param[*idx], &g);
                }
                Op::Add(a, b) => {
                    acc_node(&mut grads, *a, &g);
                    acc_node(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    acc_node(&mut grads, *a, &g);
                    let mut neg = g.clone();
                    neg.scale_in_place(-1.0);
                    acc_node(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let da = hadamard(&g, self.value(*b));
                    let db = hadamard(&g, self.value(*a));
                    acc_node(&mut grads, *a, &da);
                    acc_node(&mut grads, *b, &db);
                }
                Op::AddRow(a, row) => {
                    acc_node(&mut grads, *a, &g);
                    let mut dr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, x) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc_node(&mut grads, *row, &dr);
                }
                Op::Scale(a, s) => {
                    let mut da = g.clone();
                    da.scale_in_place(*s);
                    acc_node(&mut grads, *a, &da);
                }
                Op::AddScalar(a) => {
                    acc_node(&mut grads, *a, &g);
                }
                Op::Matmul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    acc_node(&mut grads, *a, &da);
                    acc_node(&mut grads, *b, &db);
                }
                Op::Transpose(a) => {
                    acc_node(&mut grads, *a, &g.transpose());
                }
                Op::GatherRows(a, idx) => {
                    let (m, n) = self.value(*a).shape();
                    let mut da = Tensor::zeros(m, n);
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, x) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc_node(&mut grads, *a, &da);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (m, n) = self.value(p).shape();
                        let mut dp = Tensor::zeros(m, n);
                        for r in 0..m {
                            dp.row_mut(r).copy_from_slice(g.row(off + r));
                        }
                        off += m;
                        acc_node(&mut grads, p, &dp);
                    }
                }
                Op::SliceCols(a, start, _end) => {
                    let (m, n) = self.value(*a).shape();
                    let mut da = Tensor::zeros(m, n);
                    for r in 0..m {
                        da.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc_node(&mut grads, *a, &da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (m, n) = self.value(p).shape();
                        let mut dp = Tensor::zeros(m, n);
                        for r in 0..m {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + n]);
                        }
                        off += n;
                        acc_node(&mut grads, p, &dp);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for c in 0..y.cols {
                            da.set(r, c, yr[c] * (gr[c] - s));
                        }
                    }
                    acc_node(&mut grads, *a, &da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let s: f64 = gr.iter().sum();
                        for c in 0..y.cols {
                            da.set(r, c, gr[c] - yr[c].exp() * s);
                        }
                    }
                    acc_node(&mut grads, *a, &da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let (m, n) = xv.shape();
                    let mut dx = Tensor::zeros(m, n);
                    let mut dg = Tensor::zeros(1, n);
                    let mut db = Tensor::zeros(1, n);
                    for r in 0..m {
                        let row = xv.row(r);
                        let (mean, var) = mean_var(row);
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let gr = g.row(r);
                        let dxhat: Vec<f64> =
                            (0..n).map(|j| gr[j] * gv.at(0, j)).collect();
                        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dxhat_xhat: f64 = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n as f64;
                        for j in 0..n {
                            dx.set(
                                r,
                                j,
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat),
                            );
                            dg.data[j] += gr[j] * xhat[j];
                            db.data[j] += gr[j];
                        }
                    }
                    acc_node(&mut grads, *x, &dx);
                    acc_node(&mut grads, *gain, &dg);
                    acc_node(&mut grads, *bias, &db);
                }
                Op::Gelu(a) => {
                    let xv = self.value(*a);
                    let mut da = Tensor::zeros(xv.rows, xv.cols);
                    for (k, &x) in xv.data.iter().enumerate() {
                        da.data[k] = g.data[k] * gelu_grad(x);
                    }
                    acc_node(&mut grads, *a, &da);
                }
                Op::Sum(a) => {
                    let (m, n) = self.value(*a).shape();
                    let s = g.at(0, 0);
                    let da = Tensor {
                        rows: m,
                        cols: n,
                        data: vec![s; m * n],
                    };
                    acc_node(&mut grads, *a, &da);
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.value(*a).shape();
                    let mut da = Tensor::zeros(m, n);
                    for r in 0..m {
                        for c in 0..n {
                            da.set(r, c, g.at(0, c) / m as f64);
                        }
                    }
                    acc_node(&mut grads, *a, &da);
                }
                Op::L2NormalizeRows(a) => {
                    let xv = self.value(*a);
                    let y = &self.nodes[i].value;
                    let mut da = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        let nrm = crate::nn::tensor::norm(xv.row(r));
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let ydotg = crate::nn::tensor::dot(yr, gr);
                        for c in 0..xv.cols {
                            da.set(r, c, (gr[c] - yr[c] * ydotg) / nrm);
                        }
                    }
                    acc_node(&mut grads, *a, &da);
                }
                Op::PickScalars(a, picks) => {
                    let (m, n) = self.value(*a).shape();
                    let mut da = Tensor::zeros(m, n);
                    for (k, &(r, c)) in picks.iter().enumerate() {
                        da.data[r * n + c] += g.at(0, k);
                    }
                    acc_node(&mut grads, *a, &da);
                }
                Op::LogSumExpRow(a) => {
                    let xv = self.value(*a);
                    let mut w = xv.clone();
                    softmax_in_place(w.row_mut(0));
                    w.scale_in_place(g.at(0, 0));
                    acc_node(&mut grads, *a, &w);
                }
            }
        }
        Ok(Grads { by_param })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: &Tensor) {
    match slot {
        Some(t) => {
            t.add_in_place(g).expect("gradient shape");
        }
        None => *slot = Some(g.clone()),
    }
}

fn acc_node(grads: &mut [Option<Tensor>], id: NodeId, g: &Tensor) {
    accumulate(&mut grads[id.0], g);
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| x * y)
        .collect();
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data,
    }
}

pub(crate) fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamSet;
    use crate::nn::rng::SeededRng;

    /// Central finite differences of `f` against analytic grads, per op.
    fn op_grad_check<F>(params: &mut ParamSet, f: F)
    where
        F: Fn(&mut Graph) -> NodeId,
    {
        let analytic = {
            let mut g = Graph::new(params);
            let loss = f(&mut g);
            g.backward(loss).unwrap()
        };
        let eps = 1e-6;
        for idx in 0..params.len() {
            for k in 0..params.tensor(idx).len() {
                let orig = params.tensor(idx).data[k];
                params.tensor_mut(idx).data[k] = orig + eps;
                let up = {
                    let mut g = Graph::new(params);
                    let loss = f(&mut g);
                    g.value(loss).at(0, 0)
                };
                params.tensor_mut(idx).data[k] = orig - eps;
                let down = {
                    let mut g = Graph::new(params);
                    let loss = f(&mut g);
                    g.value(loss).at(0, 0)
                };
                params.tensor_mut(idx).data[k] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = analytic
                    .get(idx)
                    .map(|t| t.data[k])
                    .unwrap_or(0.0);
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an).abs() / denom) < 1e-5,
                    "param {idx}[{k}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn random_params(shapes: &[(&str, usize, usize)], seed: u64) -> ParamSet {
        let mut rng = SeededRng::new(seed);
        let mut ps = ParamSet::new();
        for (name, r, c) in shapes {
            let data: Vec<f64> = (0..r * c).map(|_| rng.normal() * 0.5).collect();
            ps.insert(name, Tensor::from_vec(*r, *c, data).unwrap())
                .unwrap();
        }
        ps
    }

    #[test]
    fn grad_matmul_add_gelu() {
        let mut ps = random_params(&[("w", 3, 4), ("b", 1, 4), ("x", 2, 3)], 1);
        op_grad_check(&mut ps, |g| {
            let w = g.param("w").unwrap();
            let b = g.param("b").unwrap();
            let x = g.param("x").unwrap();
            let h = g.matmul(x, w).unwrap();
            let h = g.add_row(h, b).unwrap();
            let h = g.gelu(h);
            g.sum(h)
        });
    }

    #[test]
    fn grad_softmax_paths() {
        let mut ps = random_params(&[("x", 3, 5), ("y", 3, 5)], 2);
        op_grad_check(&mut ps, |g| {
            let x = g.param("x").unwrap();
            let y = g.param("y").unwrap();
            let s = g.softmax_rows(x);
            let l = g.log_softmax_rows(y);
            let m = g.mul(s, l).unwrap();
            g.sum(m)
        });
    }

    #[test]
    fn grad_layer_norm() {
        let mut ps = random_params(&[("x", 2, 6), ("g", 1, 6), ("b", 1, 6)], 3);
        op_grad_check(&mut ps, |g| {
            let x = g.param("x").unwrap();
            let gain = g.param("g").unwrap();
            let bias = g.param("b").unwrap();
            let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
            let y = g.gelu(y);
            g.sum(y)
        });
    }

    #[test]
    fn grad_gather_concat_slice() {
        let mut ps = random_params(&[("emb", 5, 4), ("w", 4, 3)], 4);
        op_grad_check(&mut ps, |g| {
            let emb = g.param("emb").unwrap();
            let rows = g.gather_rows(emb, &[0, 2, 2, 4]).unwrap();
            let w = g.param("w").unwrap();
            let h = g.matmul(rows, w).unwrap();
            let left = g.slice_cols(h, 0, 2).unwrap();
            let right = g.slice_cols(h, 1, 3).unwrap();
            let cat = g.concat_cols(&[left, right]).unwrap();
            let top = g.gather_rows(cat, &[0, 1]).unwrap();
            let bottom = g.gather_rows(cat, &[2, 3]).unwrap();
            let stacked = g.concat_rows(&[top, bottom]).unwrap();
            g.sum(stacked)
        });
    }

    #[test]
    fn grad_normalize_pick_lse() {
        let mut ps = random_params(&[("x", 3, 4)], 5);
        op_grad_check(&mut ps, |g| {
            let x = g.param("x").unwrap();
            let y = g.l2_normalize_rows(x).unwrap();
            let picks = g.pick_scalars(y, &[(0, 1), (1, 2), (2, 3), (0, 1)]).unwrap();
            let lse = g.logsumexp_row(picks).unwrap();
            let m = g.mean_rows(y);
            let ms = g.sum(m);
            g.add(lse, ms).unwrap()
        });
    }

    #[test]
    fn grad_sub_mul_scale() {
        let mut ps = random_params(&[("a", 2, 3), ("b", 2, 3)], 6);
        op_grad_check(&mut ps, |g| {
            let a = g.param("a").unwrap();
            let b = g.param("b").unwrap();
            let d = g.sub(a, b).unwrap();
            let m = g.mul(d, a).unwrap();
            let s = g.scale(m, 1.7);
            let s = g.add_scalar(s, 0.3);
            let t = g.transpose(s);
            g.sum(t)
        });
    }

    #[test]
    fn param_node_is_shared() {
        let ps = random_params(&[("w", 2, 2)], 7);
        let mut g = Graph::new(&ps);
        let a = g.param("w").unwrap();
        let b = g.param("w").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_requires_scalar() {
        let ps = random_params(&[("w", 2, 2)], 8);
        let mut g = Graph::new(&ps);
        let a = g.param("w").unwrap();
        assert!(g.backward(a).is_err());
    }
}
