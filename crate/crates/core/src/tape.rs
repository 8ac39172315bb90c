//! Tensor-level tape with reverse-mode gradients and forward-mode tangents.
//!
//! Every operation evaluates eagerly and records enough to replay its
//! derivative in either direction:
//!
//! * [`Tape::backward`] propagates cotangents from a scalar node back to
//!   every differentiable leaf (vector-Jacobian products).
//! * [`Tape::jvp`] pushes a tangent direction over the leaves forward
//!   through the recorded graph, giving the directional derivative of every
//!   node at once (Jacobian-vector products).
//!
//! For a scalar `s` and direction `v` the two agree:
//! `<backward(s), v> == jvp(v)[s]`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::IndexMap;
use crate::kernels::{self, ConvGeom};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        target: Arc<[u8]>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<Tensor>),
    Square(Var),
    Gather(Var, Arc<IndexMap>),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph. Confined to one thread of work at a time;
/// independent tapes may run in parallel.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Cotangents produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

/// Directional derivatives produced by [`Tape::jvp`].
#[derive(Debug, Clone)]
pub struct Tangents(Vec<Option<Tensor>>);

impl Tangents {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn get_or_zeros(&self, v: Var, tape: &Tape) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let t = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(t.data_mut());
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input (model parameter).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(k).shape(), stride, pad)?;
        let plane = geom.ho * geom.wo;
        let mut out = vec![0.0; geom.c_out * plane];
        if let Some(b) = bias {
            self.value(b).expect_shape("conv2d bias", &[geom.c_out])?;
            kernels::add_bias(self.value(b).data(), plane, &mut out);
        }
        kernels::conv2d_accumulate(&geom, self.value(x).data(), self.value(k).data(), &mut out);
        let value = Tensor::new(vec![geom.c_out, geom.ho, geom.wo], out)?;
        let needs = self.needs(x) || self.needs(k) || bias.is_some_and(|b| self.needs(b));
        self.push("conv2d", value, Op::Conv2d { x, k, bias, geom }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push("relu", value, Op::Relu(x), needs)
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw("upsample2")?;
        let mut out = vec![0.0; c * 4 * h * w];
        kernels::upsample2(self.value(x).data(), c, h, w, &mut out);
        let value = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        let needs = self.needs(x);
        self.push("upsample2", value, Op::Upsample2(x), needs)
    }

    /// Channel concatenation of two `[C, H, W]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ha, wa) = self.value(a).chw("concat")?;
        let (cb, hb, wb) = self.value(b).chw("concat")?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat",
                got: vec![cb, hb, wb],
                expected: vec![cb, ha, wa],
            });
        }
        let mut data = Vec::with_capacity((ca + cb) * ha * wa);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ca + cb, ha, wa], data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("concat", value, Op::Concat(a, b), needs)
    }

    /// Per-pixel softmax across the channel axis of `[C, H, W]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw("softmax")?;
        let mut out = vec![0.0; c * h * w];
        kernels::softmax_channels(self.value(x).data(), c, h * w, &mut out);
        let value = Tensor::new(vec![c, h, w], out)?;
        let needs = self.needs(x);
        self.push("softmax", value, Op::Softmax(x), needs)
    }

    /// Per-pixel cross-entropy map `[H, W]` of `[C, H, W]` logits against
    /// a label mask, via fused log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, target: &LabelMask) -> Result<Var> {
        let (c, h, w) = self.value(logits).chw("cross_entropy")?;
        if target.hw() != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                got: vec![target.height(), target.width()],
                expected: vec![h, w],
            });
        }
        let z = self.value(logits).data();
        let plane = h * w;
        let mut out = Vec::with_capacity(plane);
        for (p, &t) in target.data().iter().enumerate() {
            if t as usize >= c {
                return Err(Error::LabelOutOfRange { value: t, classes: c });
            }
            out.push(kernels::logsumexp_at(z, c, plane, p) - z[t as usize * plane + p]);
        }
        let value = Tensor::new(vec![h, w], out)?;
        let needs = self.needs(logits);
        let target: Arc<[u8]> = target.data().into();
        self.push("cross_entropy", value, Op::CrossEntropy { logits, target }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("add", value, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("sub", value, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", value, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let value = self.value(x).scale(k);
        let needs = self.needs(x);
        self.push("scale", value, Op::Scale(x, k), needs)
    }

    /// Elementwise product with a constant tensor (Hadamard product).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let value = self.value(x).zip_with(&c, "mul_const", |a, b| a * b)?;
        let needs = self.needs(x);
        self.push("mul_const", value, Op::MulConst(x, Arc::new(c)), needs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        let needs = self.needs(x);
        self.push("square", value, Op::Square(x), needs)
    }

    /// Per-channel pixel gather through an [`IndexMap`].
    pub fn gather(&mut self, x: Var, map: Arc<IndexMap>) -> Result<Var> {
        let (c, h, w) = self.value(x).chw("gather")?;
        if (h, w) != map.in_hw {
            return Err(Error::ShapeMismatch {
                op: "gather",
                got: vec![c, h, w],
                expected: vec![c, map.in_hw.0, map.in_hw.1],
            });
        }
        let (ho, wo) = map.out_hw;
        let mut out = vec![0.0; c * ho * wo];
        map.apply(self.value(x).data(), c, &mut out);
        let value = Tensor::new(vec![c, ho, wo], out)?;
        let needs = self.needs(x);
        self.push("gather", value, Op::Gather(x, map), needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push("sum", value, Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum of several scalars (or equally shaped tensors).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Option<Var>> {
        let mut it = terms.iter().copied();
        let Some(mut acc) = it.next() else {
            return Ok(None);
        };
        for t in it {
            acc = self.add(acc, t)?;
        }
        Ok(Some(acc))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, bias, geom } => {
                if self.needs(*x) {
                    let kv = self.value(*k).data();
                    accumulate(&mut grads[x.0], self.value(*x).shape(), |dx| {
                        kernels::conv2d_input_grad(geom, gd, kv, dx)
                    });
                }
                if self.needs(*k) {
                    let xv = self.value(*x).data();
                    accumulate(&mut grads[k.0], self.value(*k).shape(), |dk| {
                        kernels::conv2d_kernel_grad(geom, gd, xv, dk)
                    });
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    accumulate(&mut grads[b.0], &[geom.c_out], |db| {
                        kernels::bias_grad(gd, geom.ho * geom.wo, db)
                    });
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                accumulate(&mut grads[x.0], self.value(*x).shape(), |dx| {
                    for ((d, &xi), &gi) in dx.iter_mut().zip(xv).zip(gd) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let shape = self.value(*x).shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                accumulate(&mut grads[x.0], shape, |dx| kernels::upsample2_grad(gd, c, h, w, dx));
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], self.value(*a).shape(), |da| add_into(da, &gd[..na]));
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], self.value(*b).shape(), |db| add_into(db, &gd[na..]));
                }
            }
            Op::Softmax(x) => {
                let s = node.value.data();
                let shape = self.value(*x).shape();
                let (c, plane) = (shape[0], shape[1] * shape[2]);
                accumulate(&mut grads[x.0], shape, |dx| {
                    for p in 0..plane {
                        let dot: f64 = (0..c).map(|ch| s[ch * plane + p] * gd[ch * plane + p]).sum();
                        for ch in 0..c {
                            let i = ch * plane + p;
                            dx[i] += s[i] * (gd[i] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, target } => {
                let z = self.value(*logits);
                let (c, plane) = (z.shape()[0], z.shape()[1] * z.shape()[2]);
                let mut soft = vec![0.0; c * plane];
                kernels::softmax_channels(z.data(), c, plane, &mut soft);
                accumulate(&mut grads[logits.0], z.shape(), |dz| {
                    for p in 0..plane {
                        let t = target[p] as usize;
                        for ch in 0..c {
                            let i = ch * plane + p;
                            let onehot = if ch == t { 1.0 } else { 0.0 };
                            dz[i] += gd[p] * (soft[i] - onehot);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        accumulate(&mut grads[v.0], g.shape(), |d| add_into(d, gd));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], g.shape(), |d| add_into(d, gd));
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], g.shape(), |d| {
                        for (di, gi) in d.iter_mut().zip(gd) {
                            *di -= gi;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.needs(*v) {
                        let o = self.value(*other).data();
                        accumulate(&mut grads[v.0], g.shape(), |d| {
                            for ((di, gi), oi) in d.iter_mut().zip(gd).zip(o) {
                                *di += gi * oi;
                            }
                        });
                    }
                }
            }
            Op::Scale(x, k) => {
                accumulate(&mut grads[x.0], g.shape(), |d| {
                    for (di, gi) in d.iter_mut().zip(gd) {
                        *di += k * gi;
                    }
                });
            }
            Op::MulConst(x, c) => {
                accumulate(&mut grads[x.0], g.shape(), |d| {
                    for ((di, gi), ci) in d.iter_mut().zip(gd).zip(c.data()) {
                        *di += gi * ci;
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                accumulate(&mut grads[x.0], g.shape(), |d| {
                    for ((di, gi), xi) in d.iter_mut().zip(gd).zip(xv) {
                        *di += 2.0 * xi * gi;
                    }
                });
            }
            Op::Gather(x, map) => {
                let shape = self.value(*x).shape();
                let c = shape[0];
                accumulate(&mut grads[x.0], shape, |dx| map.scatter_add(gd, c, dx));
            }
            Op::Sum(x) => {
                let gi = gd[0];
                accumulate(&mut grads[x.0], self.value(*x).shape(), |d| {
                    for di in d {
                        *di += gi;
                    }
                });
            }
        }
    }

    /// Forward sweep of tangents. `seeds` assigns a tangent to leaf nodes;
    /// unseeded leaves have zero tangent.
    pub fn jvp(&self, seeds: &[(Var, &Tensor)]) -> Result<Tangents> {
        let mut tan: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, t) in seeds {
            let node = &self.nodes[v.0];
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::LayoutMismatch(alloc::format!("node {} is not a leaf", v.0)));
            }
            if node.value.shape() != t.shape() {
                return Err(Error::LayoutMismatch(alloc::format!(
                    "tangent shape {:?} does not match leaf shape {:?}",
                    t.shape(),
                    node.value.shape()
                )));
            }
            tan[v.0] = Some((*t).clone());
        }
        for i in 0..self.nodes.len() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            tan[i] = self.tangent_of(node, &tan);
        }
        Ok(Tangents(tan))
    }

    fn tangent_of(&self, node: &Node, tan: &[Option<Tensor>]) -> Option<Tensor> {
        let t = |v: &Var| tan[v.0].as_ref();
        let shape = node.value.shape();
        match &node.op {
            Op::Leaf => None,
            Op::Conv2d { x, k, bias, geom } => {
                let (tx, tk, tb) = (t(x), t(k), bias.as_ref().and_then(t));
                if tx.is_none() && tk.is_none() && tb.is_none() {
                    return None;
                }
                let mut out = vec![0.0; node.value.len()];
                if let Some(tx) = tx {
                    kernels::conv2d_accumulate(geom, tx.data(), self.value(*k).data(), &mut out);
                }
                if let Some(tk) = tk {
                    kernels::conv2d_accumulate(geom, self.value(*x).data(), tk.data(), &mut out);
                }
                if let Some(tb) = tb {
                    kernels::add_bias(tb.data(), geom.ho * geom.wo, &mut out);
                }
                Tensor::new(shape.to_vec(), out).ok()
            }
            Op::Relu(x) => {
                let tx = t(x)?;
                let xv = self.value(*x);
                tx.zip_with(xv, "relu", |d, v| if v > 0.0 { d } else { 0.0 }).ok()
            }
            Op::Upsample2(x) => {
                let tx = t(x)?;
                let s = tx.shape();
                let mut out = vec![0.0; node.value.len()];
                kernels::upsample2(tx.data(), s[0], s[1], s[2], &mut out);
                Tensor::new(shape.to_vec(), out).ok()
            }
            Op::Concat(a, b) => {
                let (ta, tb) = (t(a), t(b));
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let mut out = Vec::with_capacity(node.value.len());
                let na = self.value(*a).len();
                match ta {
                    Some(ta) => out.extend_from_slice(ta.data()),
                    None => out.resize(na, 0.0),
                }
                match tb {
                    Some(tb) => out.extend_from_slice(tb.data()),
                    None => out.resize(node.value.len(), 0.0),
                }
                Tensor::new(shape.to_vec(), out).ok()
            }
            Op::Softmax(x) => {
                let tx = t(x)?;
                let s = node.value.data();
                let (c, plane) = (shape[0], shape[1] * shape[2]);
                let td = tx.data();
                let mut out = vec![0.0; s.len()];
                for p in 0..plane {
                    let dot: f64 = (0..c).map(|ch| s[ch * plane + p] * td[ch * plane + p]).sum();
                    for ch in 0..c {
                        let i = ch * plane + p;
                        out[i] = s[i] * (td[i] - dot);
                    }
                }
                Tensor::new(shape.to_vec(), out).ok()
            }
            Op::CrossEntropy { logits, target } => {
                let tz = t(logits)?;
                let z = self.value(*logits);
                let (c, plane) = (z.shape()[0], z.shape()[1] * z.shape()[2]);
                let mut soft = vec![0.0; c * plane];
                kernels::softmax_channels(z.data(), c, plane, &mut soft);
                let td = tz.data();
                let out = (0..plane)
                    .map(|p| {
                        let t = target[p] as usize;
                        (0..c).map(|ch| soft[ch * plane + p] * td[ch * plane + p]).sum::<f64>() - td[t * plane + p]
                    })
                    .collect();
                Tensor::new(shape.to_vec(), out).ok()
            }
            Op::Add(a, b) => match (t(a), t(b)) {
                (None, None) => None,
                (Some(x), None) | (None, Some(x)) => Some(x.clone()),
                (Some(x), Some(y)) => x.zip_with(y, "add", |p, q| p + q).ok(),
            },
            Op::Sub(a, b) => match (t(a), t(b)) {
                (None, None) => None,
                (Some(x), None) => Some(x.clone()),
                (None, Some(y)) => Some(y.scale(-1.0)),
                (Some(x), Some(y)) => x.zip_with(y, "sub", |p, q| p - q).ok(),
            },
            Op::Mul(a, b) => {
                let (ta, tb) = (t(a), t(b));
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let out = (0..va.len())
                    .map(|i| ta.map_or(0.0, |x| x.data()[i] * vb[i]) + tb.map_or(0.0, |y| va[i] * y.data()[i]))
                    .collect();
                Tensor::new(shape.to_vec(), out).ok()
            }
            Op::Scale(x, k) => Some(t(x)?.scale(*k)),
            Op::MulConst(x, c) => t(x)?.zip_with(c, "mul_const", |d, ci| d * ci).ok(),
            Op::Square(x) => t(x)?.zip_with(self.value(*x), "square", |d, v| 2.0 * v * d).ok(),
            Op::Gather(x, map) => {
                let tx = t(x)?;
                let mut out = vec![0.0; node.value.len()];
                map.apply(tx.data(), shape[0], &mut out);
                Tensor::new(shape.to_vec(), out).ok()
            }
            Op::Sum(x) => Some(Tensor::scalar(t(x)?.sum())),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
