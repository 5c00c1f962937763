//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the record in reverse and accumulates
//! gradients; a node used several times receives the sum of its uses.
//! Parameters enter the tape by value through [`Tape::param`] and their
//! gradients are pushed back into the [`ParamStore`] with
//! [`Tape::accumulate_param_grads`].

pub mod gradcheck;
pub(crate) mod kernels;

use crate::boxes::{overlap, Corners};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::{axis_split, Tensor};

use kernels::{mm_nn, mm_nt, mm_tn};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        src_chunk: usize,
        offset: usize,
        chunk: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    L1Sum {
        pred: Var,
        target: Vec<T>,
    },
    GiouLossSum {
        pred: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    /// Same value, cut from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of `v`; meant for scalar losses.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last [`Tape::backward`] target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        mm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t")?;
        let (n, k2) = self.matrix_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        mm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of `x[.., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn elementwise(&mut self, kind: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Mul => 2,
            Elementwise::Relu | Elementwise::Sigmoid => 1,
        };
        if inputs.len() != arity {
            return Err(Error::shape("elementwise", &[arity], &[inputs.len()]));
        }
        match kind {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Relu => Ok(self.relu(inputs[0])),
            Elementwise::Sigmoid => Ok(self.sigmoid(inputs[0])),
        }
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * n * inner + j;
                let mut max = T::neg_infinity();
                for i in 0..n {
                    max = max.max(src[base + i * inner]);
                }
                let mut total = T::zero();
                for i in 0..n {
                    let e = (src[base + i * inner] - max).exp();
                    out[base + i * inner] = e;
                    total += e;
                }
                for i in 0..n {
                    out[base + i * inner] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, n, inner }, rg))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::from_usize(d).unwrap();
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::shape("concat", &[], &[]))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let chunks: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let mut shape = base;
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v).data()[o * c..(o + 1) * c]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src_chunk = n * inner;
        let offset = start * inner;
        let chunk = len * inner;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            out.extend_from_slice(&src[o * src_chunk + offset..o * src_chunk + offset + chunk]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Slice {
                x,
                outer,
                src_chunk,
                offset,
                chunk,
            },
            rg,
        ))
    }

    /// Rows of a 2-D tensor by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, _) = self.matrix_dims(x, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", self.shape(x), &[bad]));
        }
        let value = self.value(x).gather_rows(rows);
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Mean softmax cross-entropy of `logits[rows, classes]` against class
    /// indices. Zero rows give a loss of 0.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, classes) = self.matrix_dims(logits, "softmax_cross_entropy")?;
        if targets.len() != rows || targets.iter().any(|&t| t >= classes) {
            return Err(Error::shape("softmax_cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
            total += lse - row[targets[r]];
        }
        let loss = if rows == 0 {
            T::zero()
        } else {
            total / T::from_usize(rows).unwrap()
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean elementwise binary cross-entropy on logits. Empty input gives 0.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::shape("bce_with_logits", self.shape(logits), targets.shape()));
        }
        let src = self.value(logits).data();
        let mut total = T::zero();
        for (&x, &t) in src.iter().zip(targets.data()) {
            total += x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p();
        }
        let loss = if src.is_empty() {
            T::zero()
        } else {
            total / T::from_usize(src.len()).unwrap()
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    /// `Σ |pred − target|` over all elements.
    pub fn l1_sum(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("l1_sum", self.shape(pred), target.shape()));
        }
        let total = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::L1Sum {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// `Σ (1 − GIoU)` over rows of `(cx, cy, w, h)` boxes `[n, 4]`.
    pub fn giou_loss_sum(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let (_, c) = self.matrix_dims(pred, "giou_loss_sum")?;
        if c != 4 || self.shape(pred) != target.shape() {
            return Err(Error::shape("giou_loss_sum", self.shape(pred), target.shape()));
        }
        let mut total = T::zero();
        let p = self.value(pred).data();
        for (pb, tb) in p.chunks(4).zip(target.data().chunks(4)) {
            let a = Corners::from_cxcywh([pb[0], pb[1], pb[2], pb[3]]);
            let b = Corners::from_cxcywh([tb[0], tb[1], tb[2], tb[3]]);
            total += T::one() - crate::boxes::giou_corners(&a, &b)?;
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::GiouLossSum {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `loss`. Previous gradients are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradients of every parameter node into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(Some(g)) = self.grads.get(i) {
                    store.accumulate_grad(id, g);
                }
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    mm_nt(g, self.value(*b).data(), self.slot(grads, *a), m, n, k);
                }
                if self.rg(*b) {
                    mm_tn(self.value(*a).data(), g, self.slot(grads, *b), m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let n = self.value(*b).rows();
                if self.rg(*a) {
                    mm_nn(g, self.value(*b).data(), self.slot(grads, *a), m, n, k);
                }
                if self.rg(*b) {
                    mm_tn(g, self.value(*a).data(), self.slot(grads, *b), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_into(self.slot(grads, v), g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.rg(*x) {
                    add_into(self.slot(grads, *x), g);
                }
                if self.rg(*bias) {
                    let n = self.value(*bias).numel();
                    let gb = self.slot(grads, *bias);
                    if n > 0 {
                        for row in g.chunks(n) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let vb = self.value(*b).data();
                    for ((o, &gi), &bv) in self.slot(grads, *a).iter_mut().zip(g).zip(vb) {
                        *o += gi * bv;
                    }
                }
                if self.rg(*b) {
                    let va = self.value(*a).data();
                    for ((o, &gi), &av) in self.slot(grads, *b).iter_mut().zip(g).zip(va) {
                        *o += gi * av;
                    }
                }
            }
            Op::Scale(x, c) => {
                for (o, &gi) in self.slot(grads, *x).iter_mut().zip(g) {
                    *o += gi * *c;
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                for ((o, &gi), &xv) in self.slot(grads, *x).iter_mut().zip(g).zip(vx) {
                    if xv > T::zero() {
                        *o += gi;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                for ((o, &gi), &yv) in self.slot(grads, *x).iter_mut().zip(g).zip(y) {
                    *o += gi * yv * (T::one() - yv);
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = node.value.data();
                let gx = self.slot(grads, *x);
                for o in 0..*outer {
                    for j in 0..*inner {
                        let base = o * n * inner + j;
                        let mut dot = T::zero();
                        for i in 0..*n {
                            dot += g[base + i * inner] * y[base + i * inner];
                        }
                        for i in 0..*n {
                            let at = base + i * inner;
                            gx[at] += y[at] * (g[at] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data();
                if self.rg(*gain) {
                    let gg = self.slot(grads, *gain);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if self.rg(*bias) {
                    let gb = self.slot(grads, *bias);
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if self.rg(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let gx = self.slot(grads, *x);
                    let mut dh = vec![T::zero(); d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for c in 0..d {
                            dh[c] = gr[c] * gv[c];
                            sum_dh += dh[c];
                            sum_dh_h += dh[c] * hr[c];
                        }
                        let k = rstd[r] / dn;
                        for c in 0..d {
                            gx[r * d + c] += k * (dn * dh[c] - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    if self.rg(v) {
                        let gv = self.slot(grads, v);
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + c];
                            add_into(&mut gv[o * c..(o + 1) * c], src);
                        }
                    }
                    offset += c;
                }
            }
            Op::Slice {
                x,
                outer,
                src_chunk,
                offset,
                chunk,
            } => {
                let gx = self.slot(grads, *x);
                for o in 0..*outer {
                    let dst = &mut gx[o * src_chunk + offset..o * src_chunk + offset + chunk];
                    add_into(dst, &g[o * chunk..(o + 1) * chunk]);
                }
            }
            Op::GatherRows { x, rows } => {
                let c = self.value(*x).cols();
                let gx = self.slot(grads, *x);
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut gx[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }
            Op::Sum(x) => {
                for o in self.slot(grads, *x).iter_mut() {
                    *o += g[0];
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                if rows == 0 {
                    return;
                }
                let classes = probs.len() / rows;
                let k = g[0] / T::from_usize(rows).unwrap();
                let gl = self.slot(grads, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == t { T::one() } else { T::zero() };
                        gl[r * classes + c] += k * (probs[r * classes + c] - onehot);
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if targets.is_empty() {
                    return;
                }
                let k = g[0] / T::from_usize(targets.len()).unwrap();
                let x = self.value(*logits).data();
                let gl = self.slot(grads, *logits);
                for ((o, &xv), &t) in gl.iter_mut().zip(x).zip(targets) {
                    *o += k * (sigmoid(xv) - t);
                }
            }
            Op::L1Sum { pred, target } => {
                let p = self.value(*pred).data();
                let gp = self.slot(grads, *pred);
                for ((o, &pv), &tv) in gp.iter_mut().zip(p).zip(target) {
                    let d = pv - tv;
                    if d > T::zero() {
                        *o += g[0];
                    } else if d < T::zero() {
                        *o -= g[0];
                    }
                }
            }
            Op::GiouLossSum { pred, target } => {
                let p = self.value(*pred).data();
                let gp = self.slot(grads, *pred);
                for ((gr, pb), tb) in gp.chunks_mut(4).zip(p.chunks(4)).zip(target.chunks(4)) {
                    let d = giou_loss_grad([pb[0], pb[1], pb[2], pb[3]], [tb[0], tb[1], tb[2], tb[3]]);
                    for c in 0..4 {
                        gr[c] += g[0] * d[c];
                    }
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}

fn dims2<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradient of `1 − GIoU(pred, target)` with respect to `pred` in
/// `(cx, cy, w, h)` form. Ties at max/min pick the prediction side.
fn giou_loss_grad<T: Real>(pred: [T; 4], target: [T; 4]) -> [T; 4] {
    let a = Corners::from_cxcywh(pred);
    let b = Corners::from_cxcywh(target);
    let o = overlap(&a, &b);
    let zero = T::zero();
    let one = T::one();

    // loss = 2 − I/U − U/C with U = A_p + A_t − I
    let d_inter_direct = -one / o.union;
    let d_union = o.inter / (o.union * o.union) - one / o.enclosing;
    let d_encl = o.union / (o.enclosing * o.enclosing);
    let d_inter = d_inter_direct - d_union;
    let d_area = d_union;

    let w = a.x2 - a.x1;
    let h = a.y2 - a.y1;
    let overlapping = o.inter_w > zero && o.inter_h > zero;

    // partials of I, C and A_p with respect to x1, x2, y1, y2
    let mut dx1 = d_area * (-h);
    let mut dx2 = d_area * h;
    let mut dy1 = d_area * (-w);
    let mut dy2 = d_area * w;
    if overlapping {
        if a.x1 >= b.x1 {
            dx1 -= d_inter * o.inter_h;
        }
        if a.x2 <= b.x2 {
            dx2 += d_inter * o.inter_h;
        }
        if a.y1 >= b.y1 {
            dy1 -= d_inter * o.inter_w;
        }
        if a.y2 <= b.y2 {
            dy2 += d_inter * o.inter_w;
        }
    }
    if a.x1 <= b.x1 {
        dx1 -= d_encl * o.encl_h;
    }
    if a.x2 >= b.x2 {
        dx2 += d_encl * o.encl_h;
    }
    if a.y1 <= b.y1 {
        dy1 -= d_encl * o.encl_w;
    }
    if a.y2 >= b.y2 {
        dy2 += d_encl * o.encl_w;
    }

    let half = T::lit(0.5);
    [dx1 + dx2, dy1 + dy2, half * (dx2 - dx1), half * (dy2 - dy1)]
}
