//! Reverse-mode tape over rank-4 tensors.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// The differentiable primitives. Attributes travel with the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum PrimitiveKind {
    /// Inputs `[x, w]` or `[x, w, b]`; `w` is `Cout×Cin×k×k` with k ∈ {1, 3},
    /// `b` is `1×Cout×1×1`. Zero "same" padding of `k/2`.
    Conv2d { stride: usize },
    /// Inputs `[x, w]` or `[x, w, b]`; `x` is `N×Cin×1×1`, `w` is `Cout×Cin×1×1`.
    Linear,
    Relu,
    Sigmoid,
    /// Softmax across the channel axis at every (n, h, w).
    Softmax,
    Add,
    /// Inputs `[x, s]`; `s` is `N×C×1×1`, broadcast over each plane of `x`.
    ChannelMul,
    GlobalAvgPool,
    MaxPool { k: usize },
    AvgPool { k: usize },
    /// Every element replaced by its row mean (shape preserved).
    RowMean,
    /// Every element replaced by its column mean (shape preserved).
    ColMean,
    Scale { factor: Real },
    /// Inputs `[x, s]`; multiplies `x` by the element `s[index]`.
    ScaleBy { index: usize },
    /// Inputs `[logits]` of shape `N×K×1×1`; mean smoothed cross-entropy.
    CrossEntropy { labels: Vec<usize>, smoothing: Real },
    /// Pads `[c_lo, c_hi, h_lo, h_hi, w_lo, w_hi]` with a constant.
    ConstPad { pads: [usize; 6], value: Real },
    /// Sum of all elements.
    Sum,
}

impl PrimitiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            PrimitiveKind::Conv2d { .. } => "conv2d",
            PrimitiveKind::Linear => "linear",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::Sigmoid => "sigmoid",
            PrimitiveKind::Softmax => "softmax",
            PrimitiveKind::Add => "add",
            PrimitiveKind::ChannelMul => "channel_mul",
            PrimitiveKind::GlobalAvgPool => "global_avg_pool",
            PrimitiveKind::MaxPool { .. } => "max_pool",
            PrimitiveKind::AvgPool { .. } => "avg_pool",
            PrimitiveKind::RowMean => "row_mean",
            PrimitiveKind::ColMean => "col_mean",
            PrimitiveKind::Scale { .. } => "scale",
            PrimitiveKind::ScaleBy { .. } => "scale_by",
            PrimitiveKind::CrossEntropy { .. } => "cross_entropy",
            PrimitiveKind::ConstPad { .. } => "const_pad",
            PrimitiveKind::Sum => "sum",
        }
    }
}

/// Saved forward context needed by backward.
#[derive(Debug)]
enum Saved {
    None,
    Conv(ConvGeom),
    Argmax(Vec<u32>),
    Probs(Vec<Real>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    kind: Option<PrimitiveKind>,
    inputs: Vec<usize>,
    saved: Saved,
}

/// An append-only record of primitive applications.
///
/// Entries are pushed in evaluation order, so every input index is smaller
/// than the index of the entry consuming it.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
    named: Vec<(String, Var)>,
    strict: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn expect_arity(kind: &PrimitiveKind, inputs: &[Var], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{} takes {:?} inputs, got {}",
            kind.name(),
            allowed,
            inputs.len()
        )))
    }
}

fn check_pool_kernel(k: usize) -> Result<()> {
    if k % 2 == 0 {
        Err(Error::EvenKernel(k))
    } else {
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            named: Vec::new(),
            strict: true,
        }
    }

    /// Toggles the NaN/Inf check on every primitive output (on by default).
    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn var(&self, index: usize) -> Var {
        Var { tape: self.id, index }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(Error::DetachedLoss)
        }
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let mut tensor = tensor;
        tensor.grad = None;
        self.nodes.push(Node { value: tensor, kind: None, inputs: Vec::new(), saved: Saved::None });
        self.var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut tensor = tensor;
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Binds a named parameter as a leaf. Binding the same name twice returns
    /// the first leaf, so shared parameters accumulate one gradient.
    pub fn param(&mut self, name: &str, tensor: &Tensor, trainable: bool) -> Var {
        if let Some((_, v)) = self.named.iter().find(|(n, _)| n == name) {
            return *v;
        }
        let mut t = tensor.clone();
        t.requires_grad = trainable;
        let v = self.leaf(t);
        self.named.push((name.to_string(), v));
        v
    }

    pub(crate) fn named_params(&self) -> &[(String, Var)] {
        &self.named
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.index].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`, if computed.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// The leaf tensor of `v` with its `grad` field populated.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.index].value.clone();
        if t.requires_grad {
            t.grad = Some(
                self.grad(v).map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]),
            );
        }
        t
    }

    fn requires_grad(&self, i: usize) -> bool {
        self.nodes[i].value.requires_grad
    }

    /// Applies a primitive and records it.
    pub fn apply(&mut self, kind: PrimitiveKind, inputs: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let (data, shape, saved) = self.forward(&kind, &idx)?;
        if self.strict && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(kind.name().to_string()));
        }
        let mut value = Tensor::new(shape, data)?;
        value.requires_grad = idx.iter().any(|&i| self.requires_grad(i));
        self.nodes.push(Node { value, kind: Some(kind), inputs: idx, saved });
        Ok(self.var(self.nodes.len() - 1))
    }

    fn forward(&self, kind: &PrimitiveKind, idx: &[usize]) -> Result<(Vec<Real>, Shape, Saved)> {
        let v = |k: usize| &self.nodes[idx[k]].value;
        let ins: Vec<Var> = idx.iter().map(|&i| self.var(i)).collect();
        match kind {
            PrimitiveKind::Conv2d { stride } => {
                expect_arity(kind, &ins, &[2, 3])?;
                let (x, w) = (v(0), v(1));
                let (xs, ws) = (x.shape(), w.shape());
                if ws.h != ws.w || !(ws.h == 1 || ws.h == 3) {
                    return Err(Error::shape(format!("conv kernel must be 1x1 or 3x3, got {ws}")));
                }
                if ws.c != xs.c {
                    return Err(Error::shape(format!("conv weight {ws} vs input {xs}")));
                }
                if !(*stride == 1 || *stride == 2) {
                    return Err(Error::shape(format!("conv stride must be 1 or 2, got {stride}")));
                }
                let bias = if idx.len() == 3 {
                    let b = v(2);
                    if b.shape() != Shape::new(1, ws.n, 1, 1) {
                        return Err(Error::shape(format!("conv bias {} for {} outputs", b.shape(), ws.n)));
                    }
                    Some(b.data())
                } else {
                    None
                };
                let g = ConvGeom::new(xs.c, xs.h, xs.w, ws.h, *stride);
                let out = kernels::conv2d_forward(x.data(), xs, w.data(), ws.n, bias, &g);
                Ok((out, Shape::new(xs.n, ws.n, g.ho, g.wo), Saved::Conv(g)))
            }
            PrimitiveKind::Linear => {
                expect_arity(kind, &ins, &[2, 3])?;
                let (x, w) = (v(0), v(1));
                let (xs, ws) = (x.shape(), w.shape());
                if xs.plane() != 1 || ws.plane() != 1 || ws.c != xs.c {
                    return Err(Error::shape(format!("linear weight {ws} vs input {xs}")));
                }
                let mut out = vec![0.0; xs.n * ws.n];
                if idx.len() == 3 {
                    let b = v(2);
                    if b.shape() != Shape::new(1, ws.n, 1, 1) {
                        return Err(Error::shape(format!("linear bias {}", b.shape())));
                    }
                    for row in out.chunks_mut(ws.n) {
                        row.copy_from_slice(b.data());
                    }
                }
                // out[n×o] += x[n×i] · w[o×i]ᵀ
                kernels::matmul_bt_acc(x.data(), w.data(), &mut out, xs.n, xs.c, ws.n);
                Ok((out, Shape::new(xs.n, ws.n, 1, 1), Saved::None))
            }
            PrimitiveKind::Relu => {
                expect_arity(kind, &ins, &[1])?;
                Ok((v(0).data().iter().map(|&a| a.max(0.0)).collect(), v(0).shape(), Saved::None))
            }
            PrimitiveKind::Sigmoid => {
                expect_arity(kind, &ins, &[1])?;
                let out = v(0).data().iter().map(|&a| sigmoid(a)).collect();
                Ok((out, v(0).shape(), Saved::None))
            }
            PrimitiveKind::Softmax => {
                expect_arity(kind, &ins, &[1])?;
                let x = v(0);
                let s = x.shape();
                let mut out = vec![0.0; x.numel()];
                let plane = s.plane();
                for n in 0..s.n {
                    for p in 0..plane {
                        let at = |c: usize| (n * s.c + c) * plane + p;
                        let m = (0..s.c).map(|c| x.data()[at(c)]).fold(Real::NEG_INFINITY, Real::max);
                        let mut z = 0.0;
                        for c in 0..s.c {
                            let e = (x.data()[at(c)] - m).exp();
                            out[at(c)] = e;
                            z += e;
                        }
                        for c in 0..s.c {
                            out[at(c)] /= z;
                        }
                    }
                }
                Ok((out, s, Saved::None))
            }
            PrimitiveKind::Add => {
                expect_arity(kind, &ins, &[2])?;
                if v(0).shape() != v(1).shape() {
                    return Err(Error::shape(format!("add {} + {}", v(0).shape(), v(1).shape())));
                }
                let out = v(0).data().iter().zip(v(1).data()).map(|(a, b)| a + b).collect();
                Ok((out, v(0).shape(), Saved::None))
            }
            PrimitiveKind::ChannelMul => {
                expect_arity(kind, &ins, &[2])?;
                let (x, s) = (v(0), v(1));
                let xs = x.shape();
                if s.shape() != Shape::new(xs.n, xs.c, 1, 1) {
                    return Err(Error::shape(format!("channel gate {} for input {xs}", s.shape())));
                }
                let plane = xs.plane();
                let mut out = x.data().to_vec();
                for (chunk, g) in out.chunks_mut(plane.max(1)).zip(s.data()) {
                    chunk.iter_mut().for_each(|a| *a *= g);
                }
                Ok((out, xs, Saved::None))
            }
            PrimitiveKind::GlobalAvgPool => {
                expect_arity(kind, &ins, &[1])?;
                let x = v(0);
                let s = x.shape();
                if s.plane() == 0 {
                    return Err(Error::shape("global pooling over an empty plane"));
                }
                let out = x
                    .data()
                    .chunks(s.plane())
                    .map(|p| p.iter().sum::<Real>() / s.plane() as Real)
                    .collect();
                Ok((out, Shape::new(s.n, s.c, 1, 1), Saved::None))
            }
            PrimitiveKind::MaxPool { k } => {
                expect_arity(kind, &ins, &[1])?;
                check_pool_kernel(*k)?;
                let (out, arg) = kernels::max_pool_forward(v(0).data(), v(0).shape(), *k);
                Ok((out, v(0).shape(), Saved::Argmax(arg)))
            }
            PrimitiveKind::AvgPool { k } => {
                expect_arity(kind, &ins, &[1])?;
                check_pool_kernel(*k)?;
                Ok((kernels::avg_pool_forward(v(0).data(), v(0).shape(), *k), v(0).shape(), Saved::None))
            }
            PrimitiveKind::RowMean => {
                expect_arity(kind, &ins, &[1])?;
                Ok((kernels::row_mean(v(0).data(), v(0).shape()), v(0).shape(), Saved::None))
            }
            PrimitiveKind::ColMean => {
                expect_arity(kind, &ins, &[1])?;
                Ok((kernels::col_mean(v(0).data(), v(0).shape()), v(0).shape(), Saved::None))
            }
            PrimitiveKind::Scale { factor } => {
                expect_arity(kind, &ins, &[1])?;
                Ok((v(0).data().iter().map(|a| a * factor).collect(), v(0).shape(), Saved::None))
            }
            PrimitiveKind::ScaleBy { index } => {
                expect_arity(kind, &ins, &[2])?;
                let factor = *v(1).data().get(*index).ok_or_else(|| {
                    Error::shape(format!("scale index {index} outside {}", v(1).shape()))
                })?;
                Ok((v(0).data().iter().map(|a| a * factor).collect(), v(0).shape(), Saved::None))
            }
            PrimitiveKind::CrossEntropy { labels, smoothing } => {
                expect_arity(kind, &ins, &[1])?;
                let x = v(0);
                let s = x.shape();
                if s.plane() != 1 || labels.len() != s.n || s.n == 0 {
                    return Err(Error::shape(format!("{} labels for logits {s}", labels.len())));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= s.c) {
                    return Err(Error::shape(format!("label {bad} for {} classes", s.c)));
                }
                let k = s.c;
                let mut probs = vec![0.0; x.numel()];
                let mut total = 0.0;
                for (n, &label) in labels.iter().enumerate() {
                    let row = &x.data()[n * k..(n + 1) * k];
                    let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
                    let lse = m + row.iter().map(|a| (a - m).exp()).sum::<Real>().ln();
                    for c in 0..k {
                        let logp = row[c] - lse;
                        probs[n * k + c] = logp.exp();
                        let t = smoothing / k as Real + if c == label { 1.0 - smoothing } else { 0.0 };
                        total -= t * logp;
                    }
                }
                Ok((vec![total / s.n as Real], Shape::SCALAR, Saved::Probs(probs)))
            }
            PrimitiveKind::ConstPad { pads, value } => {
                expect_arity(kind, &ins, &[1])?;
                let x = v(0);
                let s = x.shape();
                let o = Shape::new(s.n, s.c + pads[0] + pads[1], s.h + pads[2] + pads[3], s.w + pads[4] + pads[5]);
                let mut out = vec![*value; o.numel()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        for i in 0..s.h {
                            let src = s.index(n, c, i, 0);
                            let dst = o.index(n, c + pads[0], i + pads[2], pads[4]);
                            out[dst..dst + s.w].copy_from_slice(&x.data()[src..src + s.w]);
                        }
                    }
                }
                Ok((out, o, Saved::None))
            }
            PrimitiveKind::Sum => {
                expect_arity(kind, &ins, &[1])?;
                Ok((vec![v(0).data().iter().sum()], Shape::SCALAR, Saved::None))
            }
        }
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let i = self.check(loss)?;
        let s = self.nodes[i].value.shape();
        if !s.is_scalar() {
            return Err(Error::NonScalarLoss(s.to_string()));
        }
        self.backward_with_seed(loss, vec![1.0])
    }

    /// Backpropagates an arbitrary cotangent `seed` placed on `output`.
    pub fn backward_with_seed(&mut self, output: Var, seed: Vec<Real>) -> Result<()> {
        let out = self.check(output)?;
        if seed.len() != self.nodes[out].value.numel() {
            return Err(Error::shape("seed gradient does not match output"));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        grads[out] = Some(seed);
        for i in (0..=out).rev() {
            if self.nodes[i].kind.is_none() || !self.requires_grad(i) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let contribs = self.node_backward(i, &dy);
            grads[i] = Some(dy);
            for (input, g) in contribs {
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.kind.is_none() && node.value.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs that require grad.
    fn node_backward(&self, i: usize, dy: &[Real]) -> Vec<(usize, Vec<Real>)> {
        let node = &self.nodes[i];
        let inputs = &node.inputs;
        let want = |k: usize| inputs.get(k).is_some_and(|&j| self.requires_grad(j));
        let val = |k: usize| &self.nodes[inputs[k]].value;
        let y = node.value.data();
        let mut out = Vec::new();
        match node.kind.as_ref().expect("non-leaf") {
            PrimitiveKind::Conv2d { .. } => {
                let Saved::Conv(g) = &node.saved else { unreachable!() };
                let (x, w) = (val(0), val(1));
                let (dx, dw, db) = kernels::conv2d_backward(
                    x.data(),
                    x.shape(),
                    w.data(),
                    w.shape().n,
                    g,
                    dy,
                    want(0),
                    want(1),
                    want(2),
                );
                for (k, d) in [(0, dx), (1, dw), (2, db)] {
                    if let Some(d) = d {
                        out.push((inputs[k], d));
                    }
                }
            }
            PrimitiveKind::Linear => {
                let (x, w) = (val(0), val(1));
                let (n, cin, cout) = (x.shape().n, x.shape().c, w.shape().n);
                if want(0) {
                    let mut dx = vec![0.0; x.numel()];
                    kernels::matmul_acc(dy, w.data(), &mut dx, n, cout, cin);
                    out.push((inputs[0], dx));
                }
                if want(1) {
                    let mut dw = vec![0.0; w.numel()];
                    kernels::matmul_at_acc(dy, x.data(), &mut dw, n, cout, cin);
                    out.push((inputs[1], dw));
                }
                if want(2) {
                    let mut db = vec![0.0; cout];
                    for row in dy.chunks(cout) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    out.push((inputs[2], db));
                }
            }
            PrimitiveKind::Relu => {
                let x = val(0).data();
                let dx = x.iter().zip(dy).map(|(&a, &g)| if a > 0.0 { g } else { 0.0 }).collect();
                out.push((inputs[0], dx));
            }
            PrimitiveKind::Sigmoid => {
                let dx = y.iter().zip(dy).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                out.push((inputs[0], dx));
            }
            PrimitiveKind::Softmax => {
                let s = node.value.shape();
                let plane = s.plane();
                let mut dx = vec![0.0; y.len()];
                for n in 0..s.n {
                    for p in 0..plane {
                        let at = |c: usize| (n * s.c + c) * plane + p;
                        let dot: Real = (0..s.c).map(|c| dy[at(c)] * y[at(c)]).sum();
                        for c in 0..s.c {
                            dx[at(c)] = y[at(c)] * (dy[at(c)] - dot);
                        }
                    }
                }
                out.push((inputs[0], dx));
            }
            PrimitiveKind::Add => {
                for k in 0..2 {
                    if want(k) {
                        out.push((inputs[k], dy.to_vec()));
                    }
                }
            }
            PrimitiveKind::ChannelMul => {
                let (x, s) = (val(0), val(1));
                let plane = x.shape().plane().max(1);
                if want(0) {
                    let mut dx = dy.to_vec();
                    for (chunk, g) in dx.chunks_mut(plane).zip(s.data()) {
                        chunk.iter_mut().for_each(|a| *a *= g);
                    }
                    out.push((inputs[0], dx));
                }
                if want(1) {
                    let ds = x
                        .data()
                        .chunks(plane)
                        .zip(dy.chunks(plane))
                        .map(|(xc, gc)| xc.iter().zip(gc).map(|(a, b)| a * b).sum())
                        .collect();
                    out.push((inputs[1], ds));
                }
            }
            PrimitiveKind::GlobalAvgPool => {
                let plane = val(0).shape().plane();
                let mut dx = vec![0.0; val(0).numel()];
                for (chunk, g) in dx.chunks_mut(plane).zip(dy) {
                    chunk.fill(g / plane as Real);
                }
                out.push((inputs[0], dx));
            }
            PrimitiveKind::MaxPool { .. } => {
                let Saved::Argmax(arg) = &node.saved else { unreachable!() };
                let mut dx = vec![0.0; y.len()];
                for (&a, &g) in arg.iter().zip(dy) {
                    dx[a as usize] += g;
                }
                out.push((inputs[0], dx));
            }
            PrimitiveKind::AvgPool { k } => {
                out.push((inputs[0], kernels::avg_pool_backward(dy, node.value.shape(), *k)));
            }
            // Both mean broadcasts are self-adjoint.
            PrimitiveKind::RowMean => out.push((inputs[0], kernels::row_mean(dy, node.value.shape()))),
            PrimitiveKind::ColMean => out.push((inputs[0], kernels::col_mean(dy, node.value.shape()))),
            PrimitiveKind::Scale { factor } => {
                out.push((inputs[0], dy.iter().map(|g| g * factor).collect()));
            }
            PrimitiveKind::ScaleBy { index } => {
                let (x, s) = (val(0), val(1));
                if want(0) {
                    let f = s.data()[*index];
                    out.push((inputs[0], dy.iter().map(|g| g * f).collect()));
                }
                if want(1) {
                    let mut ds = vec![0.0; s.numel()];
                    ds[*index] = x.data().iter().zip(dy).map(|(a, g)| a * g).sum();
                    out.push((inputs[1], ds));
                }
            }
            PrimitiveKind::CrossEntropy { labels, smoothing } => {
                let Saved::Probs(p) = &node.saved else { unreachable!() };
                let k = val(0).shape().c;
                let scale = dy[0] / labels.len() as Real;
                let mut dx = vec![0.0; p.len()];
                for (n, &label) in labels.iter().enumerate() {
                    for c in 0..k {
                        let t = smoothing / k as Real + if c == label { 1.0 - smoothing } else { 0.0 };
                        dx[n * k + c] = (p[n * k + c] - t) * scale;
                    }
                }
                out.push((inputs[0], dx));
            }
            PrimitiveKind::ConstPad { pads, .. } => {
                let s = val(0).shape();
                let o = node.value.shape();
                let mut dx = vec![0.0; s.numel()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        for i in 0..s.h {
                            let dst = s.index(n, c, i, 0);
                            let src = o.index(n, c + pads[0], i + pads[2], pads[4]);
                            dx[dst..dst + s.w].copy_from_slice(&dy[src..src + s.w]);
                        }
                    }
                }
                out.push((inputs[0], dx));
            }
            PrimitiveKind::Sum => out.push((inputs[0], vec![dy[0]; val(0).numel()])),
        }
        out.retain(|(j, _)| self.requires_grad(*j));
        out
    }

    // Convenience wrappers.

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        match b {
            Some(b) => self.apply(PrimitiveKind::Conv2d { stride }, &[x, w, b]),
            None => self.apply(PrimitiveKind::Conv2d { stride }, &[x, w]),
        }
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply(PrimitiveKind::Linear, &[x, w, b]),
            None => self.apply(PrimitiveKind::Linear, &[x, w]),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Sigmoid, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Softmax, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Add, &[a, b])
    }

    pub fn channel_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        self.apply(PrimitiveKind::ChannelMul, &[x, s])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::GlobalAvgPool, &[x])
    }

    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.apply(PrimitiveKind::MaxPool { k }, &[x])
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        self.apply(PrimitiveKind::AvgPool { k }, &[x])
    }

    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::RowMean, &[x])
    }

    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::ColMean, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: Real) -> Result<Var> {
        self.apply(PrimitiveKind::Scale { factor }, &[x])
    }

    pub fn scale_by(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        self.apply(PrimitiveKind::ScaleBy { index }, &[x, s])
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: Real) -> Result<Var> {
        self.apply(
            PrimitiveKind::CrossEntropy { labels: labels.to_vec(), smoothing },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(PrimitiveKind::Sum, &[x])
    }
}

#[inline]
pub(crate) fn sigmoid(a: Real) -> Real {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}
