use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::nn::Conv2dGeometry;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// A recording of differentiable operations.
///
/// Nodes are appended in evaluation order, so every parent id is smaller than
/// its child's id and the backward sweep is a single reverse scan. A graph is
/// confined to one thread; build a fresh one per forward pass.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Square(usize),
    Silu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
    Im2Col {
        x: usize,
        geom: Conv2dGeometry,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: usize,
        indices: Vec<usize>,
    },
    RepeatRows {
        x: usize,
        copies: usize,
    },
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar root with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when no path reaches it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.shape()),
        }
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok(a.to_vec())
    } else if nb == 1 || shape_is_suffix(b, a) {
        Ok(a.to_vec())
    } else if na == 1 || shape_is_suffix(a, b) {
        Ok(b.to_vec())
    } else {
        Err(Error::Dimension(format!(
            "shapes {a:?} and {b:?} do not broadcast (scalar or leading-dimension only)"
        )))
    }
}

fn grad_slot<T: Real>(slots: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    slots[id].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_, T> {
        self.constant(Tensor::scalar(T::lit(value)))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        if !root_value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {}",
                root_value.item()
            )));
        }
        let mut slots: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        slots[root.id] = Some(vec![T::one()]);

        for id in (0..=root.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let (lower, upper) = slots.split_at_mut(id);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            backprop_node(&nodes, id, g, lower);
        }

        let grads = slots
            .into_iter()
            .zip(nodes.iter())
            .map(|(slot, node)| {
                slot.filter(|_| node.requires_grad).map(|data| Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn backprop_node<T: Real>(nodes: &[Node<T>], id: usize, g: &[T], lower: &mut [Option<Vec<T>>]) {
    let wants = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| nodes[i].value.data();
    let numel = |i: usize| nodes[i].value.numel();

    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) {
                -T::one()
            } else {
                T::one()
            };
            if wants(*a) {
                let n = numel(*a);
                let ga = grad_slot(lower, *a, n);
                for (i, &gi) in g.iter().enumerate() {
                    ga[i % n] += gi;
                }
            }
            if wants(*b) {
                let n = numel(*b);
                let gb = grad_slot(lower, *b, n);
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % n] += sign * gi;
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (na, nb) = (va.len(), vb.len());
            if wants(*a) {
                let ga = grad_slot(lower, *a, na);
                for (i, &gi) in g.iter().enumerate() {
                    ga[i % na] += gi * vb[i % nb];
                }
            }
            if wants(*b) {
                let gb = grad_slot(lower, *b, nb);
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % nb] += gi * va[i % na];
                }
            }
        }
        Op::Scale(a, s) => {
            if wants(*a) {
                let ga = grad_slot(lower, *a, g.len());
                for (dst, &gi) in ga.iter_mut().zip(g) {
                    *dst += gi * *s;
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if wants(*a) {
                let ga = grad_slot(lower, *a, g.len());
                for (dst, &gi) in ga.iter_mut().zip(g) {
                    *dst += gi;
                }
            }
        }
        Op::Square(a) => {
            if wants(*a) {
                let va = val(*a);
                let two = T::lit(2.0);
                let ga = grad_slot(lower, *a, g.len());
                for ((dst, &gi), &x) in ga.iter_mut().zip(g).zip(va) {
                    *dst += two * x * gi;
                }
            }
        }
        Op::Silu(a) => {
            if wants(*a) {
                let va = val(*a);
                let ga = grad_slot(lower, *a, g.len());
                for ((dst, &gi), &x) in ga.iter_mut().zip(g).zip(va) {
                    let s = T::one() / (T::one() + (-x).exp());
                    *dst += gi * s * (T::one() + x * (T::one() - s));
                }
            }
        }
        Op::MatMul(a, b) => {
            let sa = nodes[*a].value.shape();
            let sb = nodes[*b].value.shape();
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if wants(*a) {
                let vb = val(*b);
                let ga = grad_slot(lower, *a, m * k);
                T::gemm(m, n, k, g, false, vb, true, ga, true);
            }
            if wants(*b) {
                let va = val(*a);
                let gb = grad_slot(lower, *b, k * n);
                T::gemm(k, m, n, va, true, g, false, gb, true);
            }
        }
        Op::Transpose(a) => {
            if wants(*a) {
                let s = nodes[*a].value.shape();
                let (r, c) = (s[0], s[1]);
                let ga = grad_slot(lower, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            if wants(*x) {
                let y = nodes[id].value.data();
                let (outer, len, inner) = axis_split(nodes[id].value.shape(), *axis);
                let gx = grad_slot(lower, *x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot += g[idx] * y[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            gx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let vgain = val(*gain);
            let c = vgain.len();
            let rows = normalized.len() / c;
            if wants(*gain) {
                let gg = grad_slot(lower, *gain, c);
                for r in 0..rows {
                    for j in 0..c {
                        gg[j] += g[r * c + j] * normalized[r * c + j];
                    }
                }
            }
            if wants(*bias) {
                let gb = grad_slot(lower, *bias, c);
                for r in 0..rows {
                    for j in 0..c {
                        gb[j] += g[r * c + j];
                    }
                }
            }
            if wants(*x) {
                let cf = T::from_usize(c).unwrap();
                let gx = grad_slot(lower, *x, rows * c);
                let mut dxhat = vec![T::zero(); c];
                for r in 0..rows {
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..c {
                        let d = g[r * c + j] * vgain[j];
                        dxhat[j] = d;
                        sum_d += d;
                        sum_dx += d * normalized[r * c + j];
                    }
                    let scale = inv_std[r] / cf;
                    for j in 0..c {
                        gx[r * c + j] +=
                            scale * (cf * dxhat[j] - sum_d - normalized[r * c + j] * sum_dx);
                    }
                }
            }
        }
        Op::Sum(a) | Op::Mean(a) => {
            if wants(*a) {
                let n = numel(*a);
                let mut gi = g[0];
                if matches!(nodes[id].op, Op::Mean(_)) {
                    gi = gi / T::from_usize(n).unwrap();
                }
                let ga = grad_slot(lower, *a, n);
                for dst in ga.iter_mut() {
                    *dst += gi;
                }
            }
        }
        Op::Im2Col { x, geom } => {
            if wants(*x) {
                let gx = grad_slot(lower, *x, geom.input_len());
                geom.col2im_accumulate(g, gx);
            }
        }
        Op::Upsample { x, factor } => {
            if wants(*x) {
                let s = nodes[*x].value.shape();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let f = *factor;
                let (oh, ow) = (h * f, w * f);
                let gx = grad_slot(lower, *x, b * h * w * c);
                for bi in 0..b {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let src = ((bi * oh + oy) * ow + ox) * c;
                            let dst = ((bi * h + oy / f) * w + ox / f) * c;
                            for ch in 0..c {
                                gx[dst + ch] += g[src + ch];
                            }
                        }
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = nodes[id].value.shape();
            let (outer, _, inner) = axis_split(out_shape, *axis);
            let total_chunk = out_shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let chunk = nodes[p].value.shape()[*axis] * inner;
                if wants(p) {
                    let gp = grad_slot(lower, p, outer * chunk);
                    for o in 0..outer {
                        let src = &g[o * total_chunk + offset..o * total_chunk + offset + chunk];
                        for (dst, &v) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *dst += v;
                        }
                    }
                }
                offset += chunk;
            }
        }
        Op::Narrow { x, axis, start } => {
            if wants(*x) {
                let in_shape = nodes[*x].value.shape();
                let out_len = nodes[id].value.shape()[*axis];
                let (outer, len, inner) = axis_split(in_shape, *axis);
                let gx = grad_slot(lower, *x, outer * len * inner);
                for o in 0..outer {
                    let src = &g[o * out_len * inner..(o + 1) * out_len * inner];
                    let dst_start = (o * len + start) * inner;
                    for (dst, &v) in gx[dst_start..dst_start + out_len * inner]
                        .iter_mut()
                        .zip(src)
                    {
                        *dst += v;
                    }
                }
            }
        }
        Op::GatherRows { table, indices } => {
            if wants(*table) {
                let s = nodes[*table].value.shape();
                let d = s[1];
                let gt = grad_slot(lower, *table, s[0] * d);
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[idx * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::RepeatRows { x, copies } => {
            if wants(*x) {
                let s = nodes[*x].value.shape();
                let (b, c) = (s[0], s[1]);
                let gx = grad_slot(lower, *x, b * c);
                for bi in 0..b {
                    for p in 0..*copies {
                        let src = (bi * copies + p) * c;
                        for j in 0..c {
                            gx[bi * c + j] += g[src + j];
                        }
                    }
                }
            }
        }
    }
}

/// `(outer, len, inner)` extents around `axis` of a row-major shape.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs_grad(self.id)
    }

    /// Same value, cut from the tape (stop-gradient).
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(
        &self,
        other: Var<'g, T>,
        f: impl Fn(T, T) -> T,
        make: fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = other.value();
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let (da, db) = (a.data(), b.data());
        let (na, nb) = (da.len(), db.len());
        let data = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self
            .graph
            .push(Tensor { shape, data }, make(self.id, other.id), requires))
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, s: f64) -> Var<'g, T> {
        let s = T::lit(s);
        self.unary(self.value().map(|v| v * s), Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g, T> {
        let c = T::lit(c);
        self.unary(self.value().map(|v| v + c), Op::AddScalar(self.id))
    }

    pub fn neg(&self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Var<'g, T> {
        self.unary(self.value().map(|v| v * v), Op::Square(self.id))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Var<'g, T> {
        self.unary(
            self.value().map(|x| x / (T::one() + (-x).exp())),
            Op::Silu(self.id),
        )
    }

    /// Multiply by a non-trainable tensor of broadcast-compatible shape.
    pub fn mask(&self, mask: &Tensor<T>) -> Result<Var<'g, T>> {
        let m = self.graph.constant(mask.clone());
        self.mul(m)
    }

    pub fn matmul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul of {sa:?} and {sb:?}: inner dimensions differ"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let requires = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(self.id, other.id),
            requires,
        ))
    }

    pub fn transpose(&self) -> Result<Var<'g, T>> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "transpose needs rank 2, got {s:?}"
            )));
        }
        let (r, c) = (s[0], s[1]);
        let d = a.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.unary(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            Op::Transpose(self.id),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = (*self.value()).clone().reshape(shape.to_vec())?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Numerically stable softmax (max-subtracted) along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = x.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for l in 0..len {
                    max = max.max(d[base + l * inner]);
                }
                let mut total = T::zero();
                for l in 0..len {
                    let e = (d[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    total += e;
                }
                for l in 0..len {
                    out[base + l * inner] = out[base + l * inner] / total;
                }
            }
        }
        Ok(self.unary(
            Tensor { shape, data: out },
            Op::Softmax { x: self.id, axis },
        ))
    }

    pub(crate) fn layer_norm_op(
        &self,
        gain: Var<'g, T>,
        bias: Var<'g, T>,
        eps: f64,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::Dimension("layer norm needs at least one axis".into()))?;
        let (vg, vb) = (gain.value(), bias.value());
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(Error::Dimension(format!(
                "layer norm over {c} channels got gain {:?} and bias {:?}",
                vg.shape(),
                vb.shape()
            )));
        }
        let rows = x.numel() / c;
        let cf = T::from_usize(c).unwrap();
        let eps = T::lit(eps);
        let d = x.data();
        let mut normalized = vec![T::zero(); d.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); d.len()];
        for r in 0..rows {
            let row = &d[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                normalized[r * c + j] = xh;
                out[r * c + j] = xh * vg.data()[j] + vb.data()[j];
            }
        }
        let requires = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.graph.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                normalized,
                inv_std,
            },
            requires,
        ))
    }

    pub fn sum(&self) -> Var<'g, T> {
        let s = self.value().data().iter().copied().sum::<T>();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g, T> {
        let v = self.value();
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).unwrap();
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Unfold `[B, H, W, C]` into convolution patches `[B·Ho·Wo, k·k·C]`.
    pub fn im2col(&self, kernel: usize, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let geom = Conv2dGeometry::new(x.shape(), kernel, stride, pad)?;
        let out = geom.im2col(x.data());
        Ok(self.unary(
            Tensor {
                shape: vec![geom.rows(), geom.cols()],
                data: out,
            },
            Op::Im2Col { x: self.id, geom },
        ))
    }

    /// Nearest-neighbour spatial upsampling of `[B, H, W, C]`.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || factor == 0 {
            return Err(Error::Dimension(format!(
                "upsample needs [B, H, W, C] and factor >= 1, got {s:?} x{factor}"
            )));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let d = x.data();
        let mut out = vec![T::zero(); b * oh * ow * c];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let dst = ((bi * oh + oy) * ow + ox) * c;
                    let src = ((bi * h + oy / factor) * w + ox / factor) * c;
                    out[dst..dst + c].copy_from_slice(&d[src..src + c]);
                }
            }
        }
        Ok(self.unary(
            Tensor {
                shape: vec![b, oh, ow, c],
                data: out,
            },
            Op::Upsample { x: self.id, factor },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Dimension(format!(
                "narrow [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_split(shape, axis);
        let d = x.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&d[from..from + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(self.unary(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Rows of a `[R, D]` table selected by `indices`.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'g, T>> {
        let t = self.value();
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("gather needs rank 2, got {s:?}")));
        }
        let d = s[1];
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Dimension(format!(
                "row index {bad} out of range for {s:?}"
            )));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        Ok(self.unary(
            Tensor {
                shape: vec![indices.len(), d],
                data: out,
            },
            Op::GatherRows {
                table: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// `[B, C]` to `[B, copies, C]` by repeating each row.
    pub fn repeat_rows(&self, copies: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 || copies == 0 {
            return Err(Error::Dimension(format!(
                "repeat_rows needs rank 2, got {s:?}"
            )));
        }
        let (b, c) = (s[0], s[1]);
        let mut out = Vec::with_capacity(b * copies * c);
        for bi in 0..b {
            for _ in 0..copies {
                out.extend_from_slice(&x.data()[bi * c..(bi + 1) * c]);
            }
        }
        Ok(self.unary(
            Tensor {
                shape: vec![b, copies, c],
                data: out,
            },
            Op::RepeatRows { x: self.id, copies },
        ))
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<'g, T: Real>(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
    let graph = first.graph;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::Dimension(format!(
            "concat axis {axis} out of range for {base:?}"
        )));
    }
    let mut out_shape = base.clone();
    out_shape[axis] = 0;
    for v in &values {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::Dimension(format!(
                "concat along axis {axis}: {base:?} vs {s:?}"
            )));
        }
        out_shape[axis] += s[axis];
    }
    let (outer, _, inner) = axis_split(&out_shape, axis);
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for v in &values {
            let chunk = v.shape()[axis] * inner;
            out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let requires = parts.iter().any(|p| p.requires_grad());
    Ok(graph.push(
        Tensor {
            shape: out_shape,
            data: out,
        },
        Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        },
        requires,
    ))
}

impl<'g, T: Real> Var<'g, T> {
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        concat(parts, axis)
    }
}
