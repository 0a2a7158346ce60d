//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its [`Tape`].
//! Nodes only reference earlier nodes, so the arena order is a topological order and
//! [`Tape::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernels::{col2im, gemm, im2col, ConvGeom};
use super::param::{ParamId, ParamStore};

/// Batch-norm variance floor.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    MatMul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    AvgPool2(usize),
    GlobalAvgPool(usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Nll {
        logp: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Bmm(usize, usize),
    Reshape(usize),
    Transpose(usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Batch statistics produced by a train-mode batch norm, for running-average updates.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

/// Which statistics a batch norm normalizes with.
pub enum BnMode<'a> {
    /// Per-channel statistics of the current batch.
    Train,
    /// Fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Result of a backward sweep.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    inputs: BTreeMap<usize, Tensor>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to an input leaf, if the loss depends on it.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.inputs.get(&v.id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn dims(v: &Tensor) -> String {
    format!("{:?}", v.shape())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Leaf holding data the caller may want a gradient for.
    pub fn input(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Input)
    }

    /// Leaf bound to a stored parameter; its gradient is reported under `id`.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Gradient of the scalar `loss` with respect to every leaf it depends on.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", dims(&nodes[loss.id].value)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        let mut out = Gradients {
            inputs: BTreeMap::new(),
            params: BTreeMap::new(),
        };

        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Input => {
                    out.inputs.insert(i, g);
                }
                Op::Param(pid) => match out.params.get_mut(pid) {
                    Some(acc) => acc.axpy(1.0, &g),
                    None => {
                        out.params.insert(*pid, g);
                    }
                },
                op => backprop(op, &node.value, &g, &nodes, &mut grads),
            }
        }
        Ok(out)
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], i: usize, shape: &[usize]) -> &'a mut [f64] {
    grads[i]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

fn backprop(op: &Op, y: &Tensor, g: &Tensor, nodes: &[Node], grads: &mut [Option<Tensor>]) {
    let v = |i: usize| -> &Tensor { &nodes[i].value };
    let gd = g.data();
    match op {
        Op::Input | Op::Param(_) => unreachable!(),
        Op::Add(a, b) => {
            for &k in &[*a, *b] {
                let s = slot(grads, k, v(k).shape());
                s.iter_mut().zip(gd).for_each(|(d, g)| *d += g);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (v(*a), v(*b));
            let s = slot(grads, *a, va.shape());
            for ((d, g), x) in s.iter_mut().zip(gd).zip(vb.data()) {
                *d += g * x;
            }
            let s = slot(grads, *b, vb.shape());
            for ((d, g), x) in s.iter_mut().zip(gd).zip(va.data()) {
                *d += g * x;
            }
        }
        Op::Scale(a, k) => {
            let s = slot(grads, *a, v(*a).shape());
            s.iter_mut().zip(gd).for_each(|(d, g)| *d += k * g);
        }
        Op::Sum(a) => {
            let g0 = g.item();
            slot(grads, *a, v(*a).shape()).iter_mut().for_each(|d| *d += g0);
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (v(*a), v(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            gemm(m, n, k, 1.0, gd, false, vb.data(), true, 1.0, slot(grads, *a, va.shape()));
            gemm(k, m, n, 1.0, va.data(), true, gd, false, 1.0, slot(grads, *b, vb.shape()));
        }
        Op::Linear { x, w, b } => {
            let (vx, vw) = (v(*x), v(*w));
            let (n, din, dout) = (vx.shape()[0], vx.shape()[1], vw.shape()[1]);
            gemm(n, dout, din, 1.0, gd, false, vw.data(), true, 1.0, slot(grads, *x, vx.shape()));
            gemm(din, n, dout, 1.0, vx.data(), true, gd, false, 1.0, slot(grads, *w, vw.shape()));
            if let Some(b) = b {
                let s = slot(grads, *b, &[dout]);
                for row in gd.chunks(dout) {
                    s.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Conv2d { x, w, geom } => {
            let (vx, vw) = (v(*x), v(*w));
            let n = vx.shape()[0];
            let c_out = vw.shape()[0];
            let rows = geom.col_rows();
            let plane = geom.out_h() * geom.out_w();
            let in_sz = geom.c_in * geom.h * geom.w;
            let mut cols = vec![0.0; rows * plane];
            let mut dcols = vec![0.0; rows * plane];
            let mut dw = vec![0.0; vw.numel()];
            {
                let dx = slot(grads, *x, vx.shape());
                for i in 0..n {
                    let xi = &vx.data()[i * in_sz..(i + 1) * in_sz];
                    let gi = &gd[i * c_out * plane..(i + 1) * c_out * plane];
                    let dxi = &mut dx[i * in_sz..(i + 1) * in_sz];
                    if geom.is_pointwise() {
                        gemm(c_out, plane, rows, 1.0, gi, false, xi, true, 1.0, &mut dw);
                        gemm(rows, c_out, plane, 1.0, vw.data(), true, gi, false, 1.0, dxi);
                    } else {
                        im2col(xi, geom, &mut cols);
                        gemm(c_out, plane, rows, 1.0, gi, false, &cols, true, 1.0, &mut dw);
                        gemm(rows, c_out, plane, 1.0, vw.data(), true, gi, false, 0.0, &mut dcols);
                        col2im(&dcols, geom, dxi);
                    }
                }
            }
            let s = slot(grads, *w, vw.shape());
            s.iter_mut().zip(&dw).for_each(|(d, g)| *d += g);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let shape = v(*x).shape().to_vec();
            let (c, inner) = (shape[1], shape[2..].iter().product::<usize>());
            let n = shape[0];
            let m = (n * inner) as f64;
            let gam = v(*gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let o = (b * c + ch) * inner;
                    for j in o..o + inner {
                        dgamma[ch] += gd[j] * xhat[j];
                        dbeta[ch] += gd[j];
                    }
                }
            }
            let dx = slot(grads, *x, &shape);
            for b in 0..n {
                for ch in 0..c {
                    let o = (b * c + ch) * inner;
                    let k = gam[ch] * inv_std[ch];
                    for j in o..o + inner {
                        dx[j] += if *train {
                            k * (gd[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                        } else {
                            k * gd[j]
                        };
                    }
                }
            }
            let s = slot(grads, *gamma, &[c]);
            s.iter_mut().zip(&dgamma).for_each(|(d, g)| *d += g);
            let s = slot(grads, *beta, &[c]);
            s.iter_mut().zip(&dbeta).for_each(|(d, g)| *d += g);
        }
        Op::Relu(a) => {
            let s = slot(grads, *a, y.shape());
            for ((d, g), yv) in s.iter_mut().zip(gd).zip(y.data()) {
                if *yv > 0.0 {
                    *d += g;
                }
            }
        }
        Op::Tanh(a) => {
            let s = slot(grads, *a, y.shape());
            for ((d, g), yv) in s.iter_mut().zip(gd).zip(y.data()) {
                *d += g * (1.0 - yv * yv);
            }
        }
        Op::Sigmoid(a) => {
            let s = slot(grads, *a, y.shape());
            for ((d, g), yv) in s.iter_mut().zip(gd).zip(y.data()) {
                *d += g * yv * (1.0 - yv);
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(y.shape(), *axis);
            let s = slot(grads, *x, y.shape());
            let yd = y.data();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| gd[idx(l)] * yd[idx(l)]).sum();
                    for l in 0..len {
                        s[idx(l)] += yd[idx(l)] * (gd[idx(l)] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = split_axis(y.shape(), *axis);
            let s = slot(grads, *x, y.shape());
            let yd = y.data();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let total: f64 = (0..len).map(|l| gd[idx(l)]).sum();
                    for l in 0..len {
                        s[idx(l)] += gd[idx(l)] - yd[idx(l)].exp() * total;
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(y.shape(), *axis);
            let mut offset = 0;
            for &k in inputs {
                let shape = v(k).shape().to_vec();
                let len = shape[*axis];
                let s = slot(grads, k, &shape);
                for o in 0..outer {
                    let src = &gd[(o * total + offset) * inner..(o * total + offset + len) * inner];
                    let dst = &mut s[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let xshape = v(*x).shape().to_vec();
            let (outer, total, inner) = split_axis(&xshape, *axis);
            let len = y.shape()[*axis];
            let s = slot(grads, *x, &xshape);
            for o in 0..outer {
                let dst = &mut s[(o * total + start) * inner..(o * total + start + len) * inner];
                let src = &gd[o * len * inner..(o + 1) * len * inner];
                dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
            }
        }
        Op::AvgPool2(a) => {
            let xs = v(*a).shape().to_vec();
            let (h, w) = (xs[2], xs[3]);
            let (oh, ow) = (h / 2, w / 2);
            let planes = xs[0] * xs[1];
            let s = slot(grads, *a, &xs);
            for p in 0..planes {
                for i in 0..oh {
                    for j in 0..ow {
                        let gq = 0.25 * gd[(p * oh + i) * ow + j];
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            s[(p * h + 2 * i + di) * w + 2 * j + dj] += gq;
                        }
                    }
                }
            }
        }
        Op::GlobalAvgPool(a) => {
            let xs = v(*a).shape().to_vec();
            let inner: usize = xs[2..].iter().product();
            let s = slot(grads, *a, &xs);
            for (p, gq) in gd.iter().enumerate() {
                let share = gq / inner as f64;
                s[p * inner..(p + 1) * inner].iter_mut().for_each(|d| *d += share);
            }
        }
        Op::Gather { table, ids } => {
            let ts = v(*table).shape().to_vec();
            let row: usize = ts[1..].iter().product();
            let s = slot(grads, *table, &ts);
            for (r, &id) in ids.iter().enumerate() {
                let dst = &mut s[id * row..(id + 1) * row];
                dst.iter_mut()
                    .zip(&gd[r * row..(r + 1) * row])
                    .for_each(|(d, g)| *d += g);
            }
        }
        Op::Nll {
            logp,
            targets,
            weights,
        } => {
            let ls = v(*logp).shape().to_vec();
            let classes = ls[1];
            let g0 = g.item();
            let s = slot(grads, *logp, &ls);
            for (r, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                s[r * classes + t] -= wt * g0;
            }
        }
        Op::Bmm(a, b) => {
            let (va, vb) = (v(*a), v(*b));
            let (bn, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
            {
                let da = slot(grads, *a, va.shape());
                for i in 0..bn {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        &gd[i * m * n..],
                        false,
                        &vb.data()[i * k * n..],
                        true,
                        1.0,
                        &mut da[i * m * k..],
                    );
                }
            }
            let db = slot(grads, *b, vb.shape());
            for i in 0..bn {
                gemm(
                    k,
                    m,
                    n,
                    1.0,
                    &va.data()[i * m * k..],
                    true,
                    &gd[i * m * n..],
                    false,
                    1.0,
                    &mut db[i * k * n..],
                );
            }
        }
        Op::Reshape(a) => {
            let s = slot(grads, *a, v(*a).shape());
            s.iter_mut().zip(gd).for_each(|(d, g)| *d += g);
        }
        Op::Transpose(a) => {
            let xs = v(*a).shape().to_vec();
            let (r, c) = (xs[0], xs[1]);
            let s = slot(grads, *a, &xs);
            for i in 0..r {
                for j in 0..c {
                    s[i * c + j] += gd[j * r + i];
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Shared handle to the forward value.
    pub fn value(&self) -> Arc<Tensor> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn check_same(&self, other: &Var<'t>, op: &'static str) -> Result<(Arc<Tensor>, Arc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, format!("{} vs {}", dims(&a), dims(&b))));
        }
        Ok((a, b))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.check_same(&other, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Ok(self
            .tape
            .push(Tensor::from_parts(a.shape().to_vec(), data), Op::Add(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.check_same(&other, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(self
            .tape
            .push(Tensor::from_parts(a.shape().to_vec(), data), Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        let out = self.value().map(|x| k * x);
        self.tape.push(out, Op::Scale(self.id, k))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", format!("{} × {}", dims(&a), dims(&b))));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, a.data(), false, b.data(), false, 0.0, &mut out);
        Ok(self
            .tape
            .push(Tensor::from_parts(vec![m, n], out), Op::MatMul(self.id, other.id)))
    }

    /// `x[N,in] · w[in,out] (+ b[out])`.
    pub fn linear(&self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        if x.rank() != 2 || wv.rank() != 2 || x.shape()[1] != wv.shape()[0] {
            return Err(Error::shape(
                "linear",
                format!("input {} vs weight {}", dims(&x), dims(&wv)),
            ));
        }
        let (n, din, dout) = (x.shape()[0], x.shape()[1], wv.shape()[1]);
        let mut out = vec![0.0; n * dout];
        if let Some(b) = &b {
            let bv = b.value();
            if bv.shape() != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {} vs output width {dout}", dims(&bv)),
                ));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(n, din, dout, 1.0, x.data(), false, wv.data(), false, beta, &mut out);
        Ok(self.tape.push(
            Tensor::from_parts(vec![n, dout], out),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
        ))
    }

    /// Bias-free 2-D convolution. `self` is `[N,C_in,H,W]`, `w` is `[C_out,C_in,kh,kw]`.
    pub fn conv2d(&self, w: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        if x.rank() != 4 || wv.rank() != 4 || x.shape()[1] != wv.shape()[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {} vs kernel {}", dims(&x), dims(&wv)),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let s = x.shape();
        let geom = ConvGeom {
            c_in: s[1],
            h: s[2],
            w: s[3],
            kh: wv.shape()[2],
            kw: wv.shape()[3],
            stride,
            pad,
        };
        if geom.h + 2 * pad < geom.kh || geom.w + 2 * pad < geom.kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {} larger than padded input {}", dims(&wv), dims(&x)),
            ));
        }
        let (n, c_out) = (s[0], wv.shape()[0]);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let plane = oh * ow;
        let rows = geom.col_rows();
        let in_sz = geom.c_in * geom.h * geom.w;
        let mut out = vec![0.0; n * c_out * plane];
        let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { rows * plane }];
        for i in 0..n {
            let xi = &x.data()[i * in_sz..(i + 1) * in_sz];
            let oi = &mut out[i * c_out * plane..(i + 1) * c_out * plane];
            if geom.is_pointwise() {
                gemm(c_out, rows, plane, 1.0, wv.data(), false, xi, false, 0.0, oi);
            } else {
                im2col(xi, &geom, &mut cols);
                gemm(c_out, rows, plane, 1.0, wv.data(), false, &cols, false, 0.0, oi);
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![n, c_out, oh, ow], out),
            Op::Conv2d {
                x: self.id,
                w: w.id,
                geom,
            },
        ))
    }

    /// Per-channel normalization over batch and spatial axes of `[N,C,...]`.
    ///
    /// Train mode returns the batch statistics so the caller can update running
    /// averages; the op itself never mutates anything.
    pub fn batch_norm(
        &self,
        gamma: Var<'t>,
        beta: Var<'t>,
        mode: BnMode<'_>,
    ) -> Result<(Var<'t>, Option<BnStats>)> {
        let x = self.value();
        if x.rank() < 2 {
            return Err(Error::shape("batch_norm", format!("need [N,C,...], got {}", dims(&x))));
        }
        let s = x.shape().to_vec();
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("{c} channels vs gamma {} beta {}", dims(&gv), dims(&bv)),
            ));
        }
        let xd = x.data();
        let m = n * inner;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * inner;
                        mean[ch] += xd[o..o + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let o = (b * c + ch) * inner;
                        var[ch] += xd[o..o + inner]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                let unbiased = var
                    .iter()
                    .map(|v| if m > 1 { v / (m - 1) as f64 } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|v| *v /= m as f64);
                let stats = BnStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("{c} channels vs running stats of len {}", mean.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * inner;
                for j in o..o + inner {
                    xhat[j] = (xd[j] - mean[ch]) * inv_std[ch];
                    out[j] = gv.data()[ch] * xhat[j] + bv.data()[ch];
                }
            }
        }
        let train = stats.is_some();
        let y = self.tape.push(
            Tensor::from_parts(s, out),
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((y, stats))
    }

    pub fn relu(&self) -> Var<'t> {
        let out = self.value().map(|x| x.max(0.0));
        self.tape.push(out, Op::Relu(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        let out = self.value().map(f64::tanh);
        self.tape.push(out, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let out = self.value().map(sigmoid);
        self.tape.push(out, Op::Sigmoid(self.id))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Arc<Tensor>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {}", dims(&x))));
        }
        Ok(x)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.check_axis("softmax", axis)?;
        if x.shape()[axis] == 0 {
            return Err(Error::shape("softmax", format!("empty axis {axis} of {}", dims(&x))));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| xd[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (xd[idx(l)] - mx).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax { x: self.id, axis },
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.check_axis("log_softmax", axis)?;
        if x.shape()[axis] == 0 {
            return Err(Error::shape("log_softmax", format!("empty axis {axis} of {}", dims(&x))));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| xd[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..len).map(|l| (xd[idx(l)] - mx).exp()).sum::<f64>().ln();
                for l in 0..len {
                    out[idx(l)] = xd[idx(l)] - lse;
                }
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LogSoftmax { x: self.id, axis },
        ))
    }

    /// Copies `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.check_axis("slice", axis)?;
        let s = x.shape();
        if len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} outside axis {axis} of {}", start + len, dims(&x)),
            ));
        }
        let (outer, total, inner) = split_axis(s, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * total + start) * inner..(o * total + start + len) * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// 2×2 average pooling with stride 2 over `[N,C,H,W]`.
    pub fn avg_pool2(&self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if x.rank() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape(
                "avg_pool2",
                format!("need [N,C,H,W] with even H and W, got {}", dims(&x)),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = s[0] * s[1];
        let xd = x.data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    let at = |di: usize, dj: usize| xd[(p * h + 2 * i + di) * w + 2 * j + dj];
                    out[(p * oh + i) * ow + j] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                }
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![s[0], s[1], oh, ow], out),
            Op::AvgPool2(self.id),
        ))
    }

    /// Per-channel spatial mean: `[N,C,...] → [N,C]`.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() < 3 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("need [N,C,spatial...], got {}", dims(&x)),
            ));
        }
        let inner: usize = x.shape()[2..].iter().product();
        let out = x
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        Ok(self.tape.push(
            Tensor::from_parts(x.shape()[..2].to_vec(), out),
            Op::GlobalAvgPool(self.id),
        ))
    }

    /// Rows `ids` of `self` along axis 0 (embedding lookup, batch gather).
    pub fn gather(&self, ids: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        let rows = t.shape()[0];
        if ids.is_empty() {
            return Err(Error::shape("gather", "empty index list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {}", dims(&t)),
            ));
        }
        let row: usize = t.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(ids.len() * row);
        for &i in ids {
            out.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = ids.len();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Weighted negative log-likelihood `Σ_n w_n · (−logp[n, t_n])` of `[N,V]` log-probs.
    pub fn nll_loss(&self, targets: &[usize], weights: &[f64]) -> Result<Var<'t>> {
        let lp = self.value();
        if lp.rank() != 2 || lp.shape()[0] != targets.len() || targets.len() != weights.len() {
            return Err(Error::shape(
                "nll_loss",
                format!(
                    "log-probs {} with {} targets and {} weights",
                    dims(&lp),
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let classes = lp.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::shape(
                "nll_loss",
                format!("target {bad} out of range for {classes} classes"),
            ));
        }
        let loss: f64 = targets
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(r, (&t, &w))| if w == 0.0 { 0.0 } else { -w * lp.data()[r * classes + t] })
            .sum();
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::Nll {
                logp: self.id,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Batched matrix product `[B,m,k] × [B,k,n] → [B,m,n]`.
    pub fn bmm(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
            return Err(Error::shape("bmm", format!("{} × {}", dims(&a), dims(&b))));
        }
        let (bn, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let mut out = vec![0.0; bn * m * n];
        for i in 0..bn {
            gemm(
                m,
                k,
                n,
                1.0,
                &a.data()[i * m * k..],
                false,
                &b.data()[i * k * n..],
                false,
                0.0,
                &mut out[i * m * n..],
            );
        }
        Ok(self
            .tape
            .push(Tensor::from_parts(vec![bn, m, n], out), Op::Bmm(self.id, other.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.value().reshape(shape).map_err(|_| {
            Error::shape("reshape", format!("{:?} to {:?}", self.shape(), shape))
        })?;
        Ok(self.tape.push(t, Op::Reshape(self.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::shape("transpose", format!("need rank 2, got {}", dims(&x))));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        Ok(self
            .tape
            .push(Tensor::from_parts(vec![c, r], out), Op::Transpose(self.id)))
    }
}

/// Concatenates along `axis`; every other dimension must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let tape = first.tape;
    let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = vals[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
    }
    for v in &vals[1..] {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!("{base:?} vs {:?} along axis {axis}", s),
            ));
        }
    }
    let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
    let (outer, _, inner) = split_axis(&base, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &vals {
            let len = v.shape()[axis];
            out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    Ok(tape.push(
        Tensor::from_parts(shape, out),
        Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        },
    ))
}

/// Channel concatenation of `[N,C,...]` maps.
pub fn concat_channels<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    concat(parts, 1)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
