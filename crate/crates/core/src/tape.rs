//! Dynamic gradient tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are only ever appended, so inputs always
//! precede their consumers and a reverse sweep over the node list visits each
//! operation exactly once in reverse topological order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops::conv::ConvGeometry;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        window: usize,
        stride: usize,
    },
    GlobalAvg(Var),
    ChannelMean(Var),
    /// Max reductions that route the gradient to one saved input index per output.
    ArgmaxRoute {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    /// Per-channel `y = x * scale + shift`, `scale = gamma * inv_std`.
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Softmax(Var),
    Reshape(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    BceLogits {
        x: Var,
        target: Vec<T>,
    },
    SoftmaxCe {
        x: Var,
        labels: Vec<usize>,
    },
    SmoothL1 {
        x: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of operations for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// gradients flow back to it.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Takes a leaf tensor (with its accumulated gradient) out of the tape,
    /// leaving a scalar placeholder behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        core::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        shape: &[usize],
        data: Vec<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::from_vec(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || Error::invalid("elementwise", format!("{op:?} needs two operands"));
        match op {
            Elementwise::Add => self.add(a, b.ok_or_else(need_b)?),
            Elementwise::Sub => self.sub(a, b.ok_or_else(need_b)?),
            Elementwise::Mul => self.mul(a, b.ok_or_else(need_b)?),
            Elementwise::Relu => self.relu(a),
            Elementwise::Sigmoid => self.sigmoid(a),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        check_broadcast(name, &sa, &sb)?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len());
        for_each_broadcast(&sa, &sb, |ia, ib| out.push(f(da[ia], db[ib])));
        self.push(name, &sa, out, op, &[a, b])
    }

    /// `a + b`; `b` may broadcast over unit dimensions of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", &shape, out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        self.push("relu", &shape, out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("sigmoid", &shape, out, Op::Sigmoid(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let out = self.data(a).to_vec();
        self.push("reshape", shape, out, Op::Reshape(a), &[a])
    }

    /// Picks elements by flat index into a 1-D result.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let d = self.data(a);
        if idx.is_empty() {
            return Err(Error::invalid("gather", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= d.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {} elements", d.len()),
            ));
        }
        let out = idx.iter().map(|&i| d[i]).collect();
        self.push(
            "gather",
            &[idx.len()],
            out,
            Op::Gather {
                x: a,
                idx: idx.to_vec(),
            },
            &[a],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum();
        self.push("sum", &[1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        let s: T = d.iter().copied().sum();
        let m = s / T::from_f64(d.len() as f64);
        self.push("mean", &[1], vec![m], Op::Mean(a), &[a])
    }

    /// Runs the reverse sweep from a scalar loss. Gradients are accumulated
    /// into every leaf that requires them; calling again without resetting
    /// adds to the existing buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: op_name(&node.op),
                });
            }
            if let Op::Leaf = node.op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            backward_op(&mut sink, Var(i), &g);
        }
        Ok(())
    }
}

/// Gradient buffers indexed by node, with access to forward values.
pub(crate) struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradSink<'_, T> {
    pub(crate) fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub(crate) fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Mutable gradient buffer for `v`, zero-initialised on first use.
    /// Returns `None` when `v` needs no gradient.
    pub(crate) fn buf(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    pub(crate) fn buf_and_data(&mut self, v: Var, other: Var) -> Option<(&mut [T], &[T])> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        let data = self.nodes[other.0].value.data();
        Some((self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]), data))
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Matmul(..) => "matmul",
        Op::Linear { .. } => "linear",
        Op::Conv2d { .. } => "conv2d",
        Op::MaxPool { .. } => "max_pool2d",
        Op::AvgPool { .. } => "avg_pool2d",
        Op::GlobalAvg(_) => "global_avg_pool",
        Op::ChannelMean(_) => "channel_mean",
        Op::ArgmaxRoute { .. } => "max_reduce",
        Op::Concat(_) => "concat",
        Op::BatchNorm { .. } => "batch_norm",
        Op::ChannelAffine { .. } => "batch_norm_eval",
        Op::Upsample { .. } => "upsample_nearest",
        Op::Softmax(_) => "softmax",
        Op::Reshape(_) => "reshape",
        Op::Gather { .. } => "gather",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::BceLogits { .. } => "bce_with_logits",
        Op::SoftmaxCe { .. } => "softmax_cross_entropy",
        Op::SmoothL1 { .. } => "smooth_l1",
    }
}

fn backward_op<T: Scalar>(s: &mut GradSink<'_, T>, out: Var, g: &[T]) {
    use crate::ops;
    let nodes = s.nodes;
    let op = &nodes[out.0].op;
    match op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            if let Some(ga) = s.buf(a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            reduce_broadcast_grad(s, a, b, g, |gv, _| gv);
        }
        &Op::Sub(a, b) => {
            if let Some(ga) = s.buf(a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            reduce_broadcast_grad(s, a, b, g, |gv, _| -gv);
        }
        &Op::Mul(a, b) => {
            let sa = s.shape(a).to_vec();
            let sb = s.shape(b).to_vec();
            if let Some((ga, db)) = s.buf_and_data(a, b) {
                for_each_broadcast(&sa, &sb, |ia, ib| ga[ia] += g[ia] * db[ib]);
            }
            reduce_broadcast_grad(s, a, b, g, |gv, av| gv * av);
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = s.buf(a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * c);
            }
        }
        &Op::Relu(a) => {
            if let Some((ga, da)) = s.buf_and_data(a, a) {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(da) {
                    if v > T::zero() {
                        *x += y;
                    }
                }
            }
        }
        &Op::Sigmoid(a) => {
            if let Some((ga, dy)) = s.buf_and_data(a, out) {
                for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(dy) {
                    *x += gy * y * (T::one() - y);
                }
            }
        }
        &Op::Matmul(a, b) => ops::linalg::matmul_backward(s, a, b, g),
        &Op::Linear { x, w, b } => ops::linalg::linear_backward(s, x, w, b, g),
        Op::Conv2d { x, w, b, geom } => ops::conv::conv2d_backward(s, *x, *w, *b, geom, g),
        Op::MaxPool { x, argmax } | Op::ArgmaxRoute { x, argmax } => {
            if let Some(gx) = s.buf(*x) {
                for (&i, &gv) in argmax.iter().zip(g) {
                    if i != usize::MAX {
                        gx[i] += gv;
                    }
                }
            }
        }
        &Op::AvgPool { x, window, stride } => {
            ops::pool::avg_pool_backward(s, x, window, stride, g)
        }
        &Op::GlobalAvg(x) => ops::pool::global_avg_backward(s, x, g),
        &Op::ChannelMean(x) => ops::pool::channel_mean_backward(s, x, g),
        Op::Concat(inputs) => ops::shape::concat_backward(s, inputs, g),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => ops::norm::batch_norm_backward(s, *x, *gamma, *beta, xhat, inv_std, g),
        Op::ChannelAffine {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => ops::norm::affine_backward(s, *x, *gamma, *beta, xhat, inv_std, g),
        &Op::Upsample { x, factor } => ops::shape::upsample_backward(s, x, factor, g),
        &Op::Softmax(a) => ops::loss::softmax_backward(s, a, out, g),
        &Op::Reshape(a) => {
            if let Some(ga) = s.buf(a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
        }
        Op::Gather { x, idx } => {
            if let Some(gx) = s.buf(*x) {
                for (&i, &gv) in idx.iter().zip(g) {
                    gx[i] += gv;
                }
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = s.buf(a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        &Op::Mean(a) => {
            if let Some(ga) = s.buf(a) {
                let c = g[0] / T::from_f64(ga.len() as f64);
                ga.iter_mut().for_each(|x| *x += c);
            }
        }
        Op::BceLogits { x, target } => ops::loss::bce_backward(s, *x, target, g),
        Op::SoftmaxCe { x, labels } => ops::loss::softmax_ce_backward(s, *x, labels, g),
        Op::SmoothL1 { x, target } => ops::loss::smooth_l1_backward(s, *x, target, g),
    }
}

/// Accumulates `f(g[ia], a[ia])` into the (possibly broadcast) gradient of `b`.
fn reduce_broadcast_grad<T: Scalar>(
    s: &mut GradSink<'_, T>,
    a: Var,
    b: Var,
    g: &[T],
    f: impl Fn(T, T) -> T,
) {
    let sa = s.shape(a).to_vec();
    let sb = s.shape(b).to_vec();
    if let Some((gb, da)) = s.buf_and_data(b, a) {
        for_each_broadcast(&sa, &sb, |ia, ib| gb[ib] += f(g[ia], da[ia]));
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `b` broadcasts to `a` when ranks agree and each extent of `b` is either
/// equal to `a`'s or 1 (per-channel `[N,C,1,1]` or per-position `[N,1,H,W]`).
fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    let ok = a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| x == y || y == 1);
    if ok {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{b:?} does not broadcast to {a:?}")))
    }
}

/// Visits every element of `a` in row-major order together with the
/// matching (broadcast) element index of `b`.
pub(crate) fn for_each_broadcast(a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = a.len();
    if a == b {
        let n: usize = a.iter().product();
        for i in 0..n {
            f(i, i);
        }
        return;
    }
    let mut bstride = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        bstride[d] = if b[d] == 1 { 0 } else { acc };
        acc *= b[d];
    }
    let inner = a[rank - 1];
    let inner_step = bstride[rank - 1];
    let outer: usize = a[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    let mut ia = 0;
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&bstride).map(|(i, s)| i * s).sum();
        for k in 0..inner {
            f(ia, base + k * inner_step);
            ia += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < a[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
