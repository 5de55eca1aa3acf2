//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted and `backward` is a single reverse sweep.
//! One graph is built per training step; parameters enter as leaves.

use crate::error::{contract_err, dim_err, Error, Result};

use super::kernels::{self, ConvGeom};
use super::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Softplus,
    Relu,
    Square,
    Sqrt,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    SumAxis(Var, usize),
    LogSumExp(Var, usize),
    Reshape(Var),
    Linear(Var, Var),
    AddBias(Var, Var),
    Conv2d(Var, Var, ConvGeom),
    ConvTranspose(Var, Var, ConvGeom, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Differentiation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

/// Numpy-style broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `shape` expressed in an output of rank `rank`, with zero
/// stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every output position of a broadcast with the matching flat
/// indices into both operands.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a trainable leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |v| -v,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Softplus => softplus,
            Unary::Relu => |v| v.max(0.0),
            Unary::Square => |v| v * v,
            Unary::Sqrt => f64::sqrt,
        };
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// `max(x, floor)`; the gradient is cut where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).map(|v| v.max(floor));
        let rg = self.rg(x);
        self.push(value, Op::ClampMin(x, floor), rg)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let mut data = vec![0.0; out_shape.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            data
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &t.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let value = Tensor::new(removed_axis(t.shape(), axis), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumAxis(x, axis), rg))
    }

    /// Numerically stable `log Σ exp` over one axis, removing it.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        if len == 0 {
            return Err(dim_err!("logsumexp over an empty axis"));
        }
        let d = t.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| d[(o * len + k) * inner + i];
                let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                data[o * inner + i] = if m == f64::NEG_INFINITY {
                    m
                } else {
                    m + (0..len).map(|k| (at(k) - m).exp()).sum::<f64>().ln()
                };
            }
        }
        let value = Tensor::new(removed_axis(t.shape(), axis), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSumExp(x, axis), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `x·Wᵀ` for `x: [N, D_in]`, `W: [D_out, D_in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = kernels::linear(self.value(x), self.value(w))?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(value, Op::Linear(x, w), rg))
    }

    /// Add a per-channel bias `b: [C]` to `x: [N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() < 2 || tb.shape() != [tx.shape()[1]] {
            return Err(dim_err!("bias {:?} does not match channels of {:?}", tb.shape(), tx.shape()));
        }
        let c = tx.shape()[1];
        let inner: usize = tx.shape()[2..].iter().product();
        let mut value = tx.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += tb.data()[(i / inner) % c];
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, g: ConvGeom) -> Result<Var> {
        let value = kernels::conv2d(self.value(x), self.value(k), g)?;
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(value, Op::Conv2d(x, k, g), rg))
    }

    pub fn conv2d_transpose(&mut self, x: Var, k: Var, g: ConvGeom, out_pad: usize) -> Result<Var> {
        let value = kernels::conv2d_transpose(self.value(x), self.value(k), g, out_pad)?;
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(value, Op::ConvTranspose(x, k, g, out_pad), rg))
    }

    /// Back-propagate from a scalar `loss`, accumulating into the gradients
    /// of every trainable leaf it reaches.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        lv.check_finite("loss")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                g.check_finite("gradient")?;
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.local_backward(id, &g)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(contrib.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut res = Vec::with_capacity(2);
        match node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xv = self.value(x);
                let d: Vec<f64> = match kind {
                    Unary::Neg => g.data().iter().map(|v| -v).collect(),
                    Unary::Exp => g.data().iter().zip(out.data()).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.data().iter().zip(xv.data()).map(|(g, x)| g / x).collect(),
                    Unary::Softplus => g.data().iter().zip(xv.data()).map(|(g, x)| g * sigmoid(*x)).collect(),
                    Unary::Relu => g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Unary::Square => g.data().iter().zip(xv.data()).map(|(g, x)| 2.0 * g * x).collect(),
                    Unary::Sqrt => g.data().iter().zip(out.data()).map(|(g, y)| 0.5 * g / y).collect(),
                };
                res.push((x, Tensor::new(xv.shape().to_vec(), d)?));
            }
            Op::Scale(x, s) => res.push((x, g.map(|v| v * s))),
            Op::AddScalar(x) => res.push((x, g.clone())),
            Op::ClampMin(x, floor) => {
                let xv = self.value(x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, x)| if *x >= floor { *g } else { 0.0 })
                    .collect();
                res.push((x, Tensor::new(xv.shape().to_vec(), d)?));
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let sa = broadcast_strides(ta.shape(), out.shape());
                let sb = broadcast_strides(tb.shape(), out.shape());
                let (da, db, gd) = (ta.data(), tb.data(), g.data());
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                    let (x, y, go) = (da[ia], db[ib], gd[o]);
                    let (pa, pb) = match kind {
                        Binary::Add => (go, go),
                        Binary::Sub => (go, -go),
                        Binary::Mul => (go * y, go * x),
                        Binary::Div => (go / y, -go * x / (y * y)),
                    };
                    ga[ia] += pa;
                    gb[ib] += pb;
                });
                if self.rg(a) {
                    res.push((a, Tensor::new(ta.shape().to_vec(), ga)?));
                }
                if self.rg(b) {
                    res.push((b, Tensor::new(tb.shape().to_vec(), gb)?));
                }
            }
            Op::SumAll(x) => {
                let gv = g.item()?;
                res.push((x, Tensor::full(self.shape(x), gv)));
            }
            Op::SumAxis(x, axis) | Op::LogSumExp(x, axis) => {
                let xv = self.value(x);
                let (outer, len, inner) = axis_split(xv.shape(), axis)?;
                let is_lse = matches!(node.op, Op::LogSumExp(..));
                let mut d = vec![0.0; xv.len()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            let src = o * inner + i;
                            let dst = (o * len + k) * inner + i;
                            d[dst] = if is_lse {
                                g.data()[src] * (xv.data()[dst] - out.data()[src]).exp()
                            } else {
                                g.data()[src]
                            };
                        }
                    }
                }
                res.push((x, Tensor::new(xv.shape().to_vec(), d)?));
            }
            Op::Reshape(x) => res.push((x, g.clone().reshape(self.shape(x))?)),
            Op::Linear(x, w) => {
                let (gx, gw) = kernels::linear_backward(self.value(x), self.value(w), g)?;
                if self.rg(x) {
                    res.push((x, gx));
                }
                if self.rg(w) {
                    res.push((w, gw));
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(x) {
                    res.push((x, g.clone()));
                }
                if self.rg(b) {
                    let xv = self.value(x);
                    let c = xv.shape()[1];
                    let inner: usize = xv.shape()[2..].iter().product();
                    let mut gb = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        gb[(i / inner) % c] += v;
                    }
                    res.push((b, Tensor::from_vec(gb)));
                }
            }
            Op::Conv2d(x, k, geom) => {
                let (gx, gk) =
                    kernels::conv2d_backward(self.value(x), self.value(k), g, geom, self.rg(x), self.rg(k))?;
                res.extend(gx.map(|t| (x, t)));
                res.extend(gk.map(|t| (k, t)));
            }
            Op::ConvTranspose(x, k, geom, op) => {
                let (gx, gk) = kernels::conv2d_transpose_backward(
                    self.value(x),
                    self.value(k),
                    g,
                    geom,
                    op,
                    self.rg(x),
                    self.rg(k),
                )?;
                res.extend(gx.map(|t| (x, t)));
                res.extend(gk.map(|t| (k, t)));
            }
        }
        for (_, t) in &res {
            if !t.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at node {id} ({:?})", node.op)));
            }
        }
        Ok(res)
    }
}
