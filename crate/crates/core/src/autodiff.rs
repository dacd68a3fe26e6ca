//! A small tape for reverse-mode differentiation over [`Tensor`]s.
//!
//! Every forward call records a node; [`Graph::backward`] walks the tape in
//! reverse and accumulates vector-Jacobian products. Parameters are bound
//! lazily from a borrowed [`ParamStore`] so a graph never copies weights.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kt * self.kh * self.kw * self.cin
    }

    fn cells(&self) -> usize {
        self.t * self.h * self.w
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool2(Var),
    MeanRows(Var),
    WeightedSum(Var, Tensor),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}

fn acc(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    /// A graph with no parameter store; only leaves and constants.
    pub fn detached() -> Graph<'static> {
        Graph {
            params: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(t)) => t,
            (Op::Param(id), None) => self.params.expect("param node without store").get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.needs(*v));
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients are not tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is tracked and readable via [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose2();
        self.push(t, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` input.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        if tb.len() != n {
            return Err(Error::Shape(format!(
                "bias {:?} for rows of {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::Shape(format!(
                "mul {:?} * {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v.max(0.0)).collect()).unwrap();
        self.push(out, Op::Relu(a), &[a])
    }

    /// Softmax along the last axis of a 2-D view.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != n || b.len() != n {
            return Err(Error::Shape(format!(
                "layer norm over {n} features with gain {:?}",
                g.shape()
            )));
        }
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = Vec::with_capacity(tx.rows());
        let mut out = vec![0.0; tx.len()];
        for (r, row) in tx.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(Error::Shape(format!(
                    "concat rows of width {} and {cols}",
                    t.cols()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        if start + len > t.rows() {
            return Err(Error::Shape(format!(
                "rows {start}..{} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let out = Tensor::new(&[len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::Shape("concat cols with unequal row counts".into()));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(Error::Shape(format!(
                "cols {start}..{} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let out = Tensor::new(&[t.rows(), len], data)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::Input(format!(
                    "id {id} outside table of {} rows",
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(&[ids.len(), c], data)?;
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Stride-1 "same" 3-D convolution over a `[T, H, W, Cin]` input with a
    /// `[kt, kh, kw, Cin, Cout]` kernel and a `Cout` bias.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 5 || ws[3] != xs[3] || tb.len() != ws[4] {
            return Err(Error::Shape(format!(
                "conv3d input {xs:?}, kernel {ws:?}, bias {:?}",
                tb.shape()
            )));
        }
        if ws[..3].iter().any(|k| k % 2 == 0) {
            return Err(Error::Shape(format!("conv3d kernel {ws:?} must be odd")));
        }
        let geom = ConvGeom {
            t: xs[0],
            h: xs[1],
            w: xs[2],
            cin: xs[3],
            cout: ws[4],
            kt: ws[0],
            kh: ws[1],
            kw: ws[2],
        };
        let cols = im2col(tx.data(), &geom);
        let (m, k, n) = (geom.cells(), geom.patch(), geom.cout);
        let mut out = vec![0.0; m * n];
        for row in out.chunks_mut(n) {
            row.copy_from_slice(tb.data());
        }
        matmul_acc(&cols, tw.data(), &mut out, m, k, n);
        let out = Tensor::new(&[geom.t, geom.h, geom.w, n], out)?;
        Ok(self.push(out, Op::Conv3d { x, w, b, geom, cols }, &[x, w, b]))
    }

    /// 2×2 spatial average pooling of `[T, H, W, C]`; odd trailing rows and
    /// columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(Error::Shape(format!("avg_pool2 on {s:?}")));
        }
        let (tt, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; tt * ho * wo * c];
        let d = t.data();
        for f in 0..tt {
            for i in 0..ho {
                for j in 0..wo {
                    let o = ((f * ho + i) * wo + j) * c;
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let src = ((f * h + 2 * i + di) * w + 2 * j + dj) * c;
                        for ch in 0..c {
                            out[o + ch] += 0.25 * d[src + ch];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[tt, ho, wo, c], out)?;
        Ok(self.push(out, Op::AvgPool2(x), &[x]))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; n];
        for row in t.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v / m as f64;
            }
        }
        let out = Tensor::new(&[1, n], out).unwrap();
        self.push(out, Op::MeanRows(a), &[a])
    }

    /// Scalar `Σ a ⊙ w` for a constant `w`.
    pub fn weighted_sum(&mut self, a: Var, w: Tensor) -> Result<Var> {
        let t = self.value(a);
        if t.len() != w.len() {
            return Err(Error::Shape(format!(
                "weighted sum of {:?} by {:?}",
                t.shape(),
                w.shape()
            )));
        }
        let s: f64 = t.data().iter().zip(w.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, w), &[a]))
    }

    /// Mean cross-entropy over the positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        let (s, v) = (t.rows(), t.cols());
        if targets.len() != s || mask.len() != s {
            return Err(Error::Shape(format!(
                "{s} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::Input("cross entropy over fully padded targets".into()));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(v).enumerate() {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(Error::Input(format!("target {} outside vocab {v}", targets[i])));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / count as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out), 1.0));
        let mut params = HashMap::new();

        for i in (0..=out.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(Var(i), &node.op, &gy, &mut grads, &mut params);
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(
        &self,
        out: Var,
        op: &Op,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut HashMap<ParamId, Tensor>,
    ) {
        let g = gy.data();
        match op {
            Op::Leaf => {}
            Op::Param(id) => match params.get_mut(id) {
                Some(t) => t.add_assign(gy),
                None => {
                    params.insert(*id, gy.clone());
                }
            },
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    acc(&mut grads[a.0], ta.shape(), |d| matmul_nt_acc(g, tb.data(), d, m, n, k));
                }
                if self.needs(*b) {
                    acc(&mut grads[b.0], tb.shape(), |d| matmul_tn_acc(ta.data(), g, d, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let gt = gy.transpose2();
                acc(&mut grads[a.0], self.shape(*a), |d| add_into(d, gt.data()));
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        acc(&mut grads[v.0], self.shape(*v), |d| add_into(d, g));
                    }
                }
            }
            Op::AddBias(a, b) => {
                if self.needs(*a) {
                    acc(&mut grads[a.0], self.shape(*a), |d| add_into(d, g));
                }
                if self.needs(*b) {
                    let n = self.value(*b).len();
                    acc(&mut grads[b.0], self.shape(*b), |d| {
                        for row in g.chunks(n) {
                            add_into(d, row);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(&mut grads[a.0], ta.shape(), |d| {
                        for ((d, gv), bv) in d.iter_mut().zip(g).zip(tb.data()) {
                            *d += gv * bv;
                        }
                    });
                }
                if self.needs(*b) {
                    acc(&mut grads[b.0], tb.shape(), |d| {
                        for ((d, gv), av) in d.iter_mut().zip(g).zip(ta.data()) {
                            *d += gv * av;
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                acc(&mut grads[a.0], self.shape(*a), |d| {
                    for (d, gv) in d.iter_mut().zip(g) {
                        *d += s * gv;
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(&mut grads[a.0], x.shape(), |d| {
                    for ((d, gv), xv) in d.iter_mut().zip(g).zip(x.data()) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(out);
                let n = y.cols();
                acc(&mut grads[a.0], self.shape(*a), |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let n = gam.len();
                if self.needs(*x) {
                    acc(&mut grads[x.0], self.shape(*x), |d| {
                        for (r, rs) in rstd.iter().enumerate() {
                            let grow = &g[r * n..(r + 1) * n];
                            let xh = &xhat[r * n..(r + 1) * n];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..n {
                                let dyh = grow[j] * gam[j];
                                s1 += dyh;
                                s2 += dyh * xh[j];
                            }
                            for j in 0..n {
                                let dyh = grow[j] * gam[j];
                                d[r * n + j] += rs / n as f64 * (n as f64 * dyh - s1 - xh[j] * s2);
                            }
                        }
                    });
                }
                if self.needs(*gamma) {
                    acc(&mut grads[gamma.0], self.shape(*gamma), |d| {
                        for (grow, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                d[j] += grow[j] * xh[j];
                            }
                        }
                    });
                }
                if self.needs(*beta) {
                    acc(&mut grads[beta.0], self.shape(*beta), |d| {
                        for grow in g.chunks(n) {
                            add_into(d, grow);
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                acc(&mut grads[a.0], self.shape(*a), |d| add_into(d, g));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.needs(*p) {
                        acc(&mut grads[p.0], self.shape(*p), |d| add_into(d, &g[off..off + len]));
                    }
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                let c = gy.cols();
                let off = start * c;
                acc(&mut grads[a.0], self.shape(*a), |d| {
                    add_into(&mut d[off..off + g.len()], g)
                });
            }
            Op::ConcatCols(parts) => {
                let total = gy.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.needs(*p) {
                        acc(&mut grads[p.0], self.shape(*p), |d| {
                            for (r, drow) in d.chunks_mut(w).enumerate() {
                                add_into(drow, &g[r * total + off..r * total + off + w]);
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let total = self.value(*a).cols();
                let w = gy.cols();
                acc(&mut grads[a.0], self.shape(*a), |d| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        add_into(&mut d[r * total + start..r * total + start + w], grow);
                    }
                });
            }
            Op::Gather(table, ids) => {
                let c = gy.cols();
                acc(&mut grads[table.0], self.shape(*table), |d| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * c..(id + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Conv3d { x, w, b, geom, cols } => {
                let (m, k, n) = (geom.cells(), geom.patch(), geom.cout);
                if self.needs(*w) {
                    acc(&mut grads[w.0], self.shape(*w), |d| matmul_tn_acc(cols, g, d, m, k, n));
                }
                if self.needs(*b) {
                    acc(&mut grads[b.0], self.shape(*b), |d| {
                        for row in g.chunks(n) {
                            add_into(d, row);
                        }
                    });
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; m * k];
                    matmul_nt_acc(g, self.value(*w).data(), &mut dcols, m, n, k);
                    acc(&mut grads[x.0], self.shape(*x), |d| col2im_acc(&dcols, geom, d));
                }
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x).to_vec();
                let (tt, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                acc(&mut grads[x.0], &s, |d| {
                    for f in 0..tt {
                        for i in 0..ho {
                            for j in 0..wo {
                                let o = ((f * ho + i) * wo + j) * c;
                                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let dst = ((f * h + 2 * i + di) * w + 2 * j + dj) * c;
                                    for ch in 0..c {
                                        d[dst + ch] += 0.25 * g[o + ch];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let t = self.value(*a);
                let (m, n) = (t.rows(), t.cols());
                acc(&mut grads[a.0], t.shape(), |d| {
                    for row in d.chunks_mut(n) {
                        for (dv, gv) in row.iter_mut().zip(g) {
                            *dv += gv / m as f64;
                        }
                    }
                });
            }
            Op::WeightedSum(a, w) => {
                let s = g[0];
                acc(&mut grads[a.0], self.shape(*a), |d| {
                    for (dv, wv) in d.iter_mut().zip(w.data()) {
                        *dv += s * wv;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let s = g[0] / *count as f64;
                acc(&mut grads[logits.0], self.shape(*logits), |d| {
                    for (i, drow) in d.chunks_mut(v).enumerate() {
                        if !mask[i] {
                            continue;
                        }
                        let prow = &probs[i * v..(i + 1) * v];
                        for j in 0..v {
                            drow[j] += s * prow[j];
                        }
                        drow[targets[i]] -= s;
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (a, b) in d.iter_mut().zip(g) {
        *a += b;
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.cells() * patch];
    let (pt, ph, pw) = (g.kt / 2, g.kh / 2, g.kw / 2);
    for t in 0..g.t {
        for h in 0..g.h {
            for w in 0..g.w {
                let row = ((t * g.h + h) * g.w + w) * patch;
                let mut col = row;
                for dt in 0..g.kt {
                    let st = t as isize + dt as isize - pt as isize;
                    for dh in 0..g.kh {
                        let sh = h as isize + dh as isize - ph as isize;
                        for dw in 0..g.kw {
                            let sw = w as isize + dw as isize - pw as isize;
                            if st >= 0
                                && sh >= 0
                                && sw >= 0
                                && (st as usize) < g.t
                                && (sh as usize) < g.h
                                && (sw as usize) < g.w
                            {
                                let src = (((st as usize * g.h) + sh as usize) * g.w + sw as usize)
                                    * g.cin;
                                cols[col..col + g.cin].copy_from_slice(&x[src..src + g.cin]);
                            }
                            col += g.cin;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let patch = g.patch();
    let (pt, ph, pw) = (g.kt / 2, g.kh / 2, g.kw / 2);
    for t in 0..g.t {
        for h in 0..g.h {
            for w in 0..g.w {
                let mut col = ((t * g.h + h) * g.w + w) * patch;
                for dt in 0..g.kt {
                    let st = t as isize + dt as isize - pt as isize;
                    for dh in 0..g.kh {
                        let sh = h as isize + dh as isize - ph as isize;
                        for dw in 0..g.kw {
                            let sw = w as isize + dw as isize - pw as isize;
                            if st >= 0
                                && sh >= 0
                                && sw >= 0
                                && (st as usize) < g.t
                                && (sh as usize) < g.h
                                && (sw as usize) < g.w
                            {
                                let dst = (((st as usize * g.h) + sh as usize) * g.w + sw as usize)
                                    * g.cin;
                                add_into(&mut dx[dst..dst + g.cin], &dcols[col..col + g.cin]);
                            }
                            col += g.cin;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` around every coordinate of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += eps;
                let mut m = x.clone();
                m.data_mut()[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    fn check(x: Tensor, build: impl Fn(&mut Graph<'static>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let forward = |x: &Tensor| {
            let mut g = Graph::detached();
            let v = g.leaf(x.clone());
            let y = build(&mut g, v);
            g.value(y).clone()
        };
        let y0 = forward(&x);
        let w = Tensor::uniform(y0.shape(), 1.0, &mut rng);
        let scalar = |x: &Tensor| {
            let y = forward(x);
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::detached();
        let v = g.leaf(x.clone());
        let y = build(&mut g, v);
        let l = g.weighted_sum(y, w.clone()).unwrap();
        let grads = g.backward(l).unwrap();
        let analytic = grads.wrt(v).unwrap();
        let numeric = numeric_grad(&x, scalar);
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn softmax_and_layer_norm_gradients() {
        check(rand_t(&[3, 5], 1), |g, x| g.softmax_rows(x));
        check(rand_t(&[3, 5], 2), |g, x| {
            let gam = g.constant(rand_t(&[5], 9));
            let bet = g.constant(rand_t(&[5], 10));
            g.layer_norm(x, gam, bet).unwrap()
        });
    }

    #[test]
    fn matmul_transpose_slice_gradients() {
        check(rand_t(&[4, 3], 4), |g, x| {
            let xt = g.transpose(x);
            let y = g.matmul(x, xt).unwrap();
            let a = g.slice_cols(y, 1, 2).unwrap();
            let b = g.slice_rows(y, 0, 4).unwrap();
            let b = g.slice_cols(b, 0, 2).unwrap();
            g.concat_rows(&[a, b]).unwrap()
        });
    }

    #[test]
    fn conv_and_pool_gradients() {
        let w = rand_t(&[3, 3, 3, 2, 3], 5);
        check(rand_t(&[3, 4, 4, 2], 6), move |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(Tensor::from_fn(&[3], |i| i as f64));
            let y = g.conv3d(x, wv, bv).unwrap();
            g.avg_pool2(y).unwrap()
        });
        let x = rand_t(&[2, 3, 3, 2], 7);
        check(rand_t(&[3, 1, 1, 2, 2], 8), move |g, w| {
            let xv = g.constant(x.clone());
            let bv = g.constant(Tensor::zeros(&[2]));
            g.conv3d(xv, w, bv).unwrap()
        });
    }

    #[test]
    fn cross_entropy_gradient_and_value() {
        let mut g = Graph::detached();
        let l = g.leaf(Tensor::zeros(&[2, 4]));
        let ce = g.cross_entropy(l, &[1, 3], &[true, false]).unwrap();
        assert!((g.value(ce).data()[0] - 4f64.ln()).abs() < 1e-12);
        check(rand_t(&[3, 4], 11), |g, x| {
            g.cross_entropy(x, &[0, 2, 1], &[true, true, false]).unwrap()
        });
    }

    #[test]
    fn gather_scatters_gradient() {
        check(rand_t(&[4, 2], 12), |g, t| g.gather(t, &[1, 1, 3]).unwrap());
    }
}
