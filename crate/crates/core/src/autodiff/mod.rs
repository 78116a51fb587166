//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every primitive executes eagerly, appends one node holding its output
//! value and the inputs its backward rule needs, and checks that the result
//! is finite. `backward` walks the nodes in reverse execution order once.

pub mod gradcheck;
pub mod kernels;

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use kernels as k;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Abs,
    Exp,
    Log,
    Sqrt,
    Sigmoid,
    /// `x * sigmoid(x)`
    Silu,
    Scale(f64),
    AddScalar(f64),
}

/// Backward rule of a user-supplied primitive: maps the output gradient and
/// the input values to one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, alpha: T },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, alpha: T, stats: k::AttentionStats<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    Upsample(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    SumAxes(Var),
    Gather(Var, Vec<usize>),
    Custom(Vec<Var>, CustomBackward<T>),
}

impl<T> fmt::Debug for Op<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Binary(..) => "binary",
            Op::Unary(..) => "unary",
            Op::MatMul { .. } => "matmul",
            Op::Softmax(_) => "softmax",
            Op::Attention { .. } => "attention",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample(_) => "upsample",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::SumAxes(_) => "sum",
            Op::Gather(..) => "gather",
            Op::Custom(..) => "custom",
        };
        f.write_str(name)
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on `v` by the last `backward`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::domain(op_name, "produced a non-finite value"));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, rg))
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (name, out) = match op {
            BinaryOp::Add => ("add", k::broadcast_binary(av, bv, |x, y| x + y)?),
            BinaryOp::Sub => ("sub", k::broadcast_binary(av, bv, |x, y| x - y)?),
            BinaryOp::Mul => ("mul", k::broadcast_binary(av, bv, |x, y| x * y)?),
            BinaryOp::Div => {
                if bv.data().iter().any(|v| v.is_zero()) {
                    return Err(Error::domain("div", "division by zero"));
                }
                ("div", k::broadcast_binary(av, bv, |x, y| x / y)?)
            }
        };
        self.push(name, out, Op::Binary(op, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (name, out) = match op {
            UnaryOp::Neg => ("neg", xv.map(|v| -v)),
            UnaryOp::Abs => ("abs", xv.map(|v| v.abs())),
            UnaryOp::Exp => ("exp", xv.map(|v| v.exp())),
            UnaryOp::Log => {
                if xv.data().iter().any(|&v| v <= T::zero()) {
                    return Err(Error::domain("log", "input must be strictly positive"));
                }
                ("log", xv.map(|v| v.ln()))
            }
            UnaryOp::Sqrt => {
                if xv.data().iter().any(|&v| v <= T::zero()) {
                    return Err(Error::domain("sqrt", "input must be strictly positive"));
                }
                ("sqrt", xv.map(|v| v.sqrt()))
            }
            UnaryOp::Sigmoid => ("sigmoid", xv.map(sigmoid)),
            UnaryOp::Silu => ("silu", xv.map(|v| v * sigmoid(v))),
            UnaryOp::Scale(c) => {
                let c = T::from_f64_lossy(c);
                ("scale", xv.map(|v| v * c))
            }
            UnaryOp::AddScalar(c) => {
                let c = T::from_f64_lossy(c);
                ("add_scalar", xv.map(|v| v + c))
            }
        };
        self.push(name, out, Op::Unary(op, x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Silu, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::AddScalar(c), x)
    }

    // ── reductions ───────────────────────────────────────────────────

    /// Sum over `axes`, keeping them as extent-1 axes.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = k::sum_axes(self.value(x), axes)?;
        self.push("sum", out, Op::SumAxes(x), &[x])
    }

    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let count: usize = axes.iter().map(|&a| self.shape(x).get(a).copied().unwrap_or(1)).product();
        let s = self.sum_axes(x, axes)?;
        self.scale(s, 1.0 / count as f64)
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum_axes(x, &axes)?;
        self.reshape(s, &[1])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ── linear algebra & neural primitives ───────────────────────────

    /// `a @ b` over the last two axes; leading batch axes must match or one
    /// operand must be a plain matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false, 1.0)
    }

    /// `alpha * op(a) @ op(b)` where `op` optionally transposes the last two axes.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool, alpha: f64) -> Result<Var> {
        let alpha = T::from_f64_lossy(alpha);
        let out = k::matmul_forward(self.value(a), self.value(b), ta, tb, alpha)?;
        self.push("matmul", out, Op::MatMul { a, b, ta, tb, alpha }, &[a, b])
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).last().copied().unwrap_or(0) == 0 {
            return Err(Error::dim("softmax over an empty last dimension"));
        }
        let out = k::softmax_lastdim_forward(self.value(x));
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Fused `softmax(alpha * q kᵀ) v` over `[B, T, d]` operands. With
    /// `capture`, the `[B, Tq, Tk]` probabilities are also recorded as a
    /// constant for inspection; otherwise they are never stored.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, alpha: f64, capture: bool) -> Result<(Var, Option<Var>)> {
        let alpha = T::from_f64_lossy(alpha);
        let (out, stats, probs) = k::attention_forward(self.value(q), self.value(k), self.value(v), alpha, capture)?;
        let o = self.push("attention", out, Op::Attention { q, k, v, alpha, stats }, &[q, k, v])?;
        Ok((o, probs.map(|p| self.constant(p))))
    }

    /// Same-padded convolution; `stride` is 1 or 2, the kernel odd and square.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let out = k::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", out, Op::Conv2d { x, w, b, stride }, &inputs)
    }

    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = k::upsample_bilinear_forward(self.value(x), out_h, out_w)?;
        self.push("upsample", out, Op::Upsample(x), &[x])
    }

    // ── layout ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = k::permute(self.value(x), perm)?;
        self.push("permute", out, Op::Permute(x, perm.to_vec()), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = k::concat(&vals, axis)?;
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = k::slice_axis(self.value(x), axis, start, end)?;
        self.push("slice", out, Op::Slice { x, axis, start }, &[x])
    }

    /// Reorders (or repeats) entries of the leading axis.
    pub fn gather_axis0(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_axis0(order)?;
        self.push("gather", out, Op::Gather(x, order.to_vec()), &[x])
    }

    /// Records a primitive with a caller-provided value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: CustomBackward<T>) -> Result<Var> {
        self.push("custom", value, Op::Custom(inputs.to_vec(), backward), inputs)
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Propagates d(root)/d(node) to every node that requires a gradient.
    /// Gradients of intermediate nodes are released once consumed; leaf
    /// gradients stay available through [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Binary(op, a, b) => {
                    let (a, b) = (*a, *b);
                    let (av, bv) = (val(a), val(b));
                    let (ga, gb) = match op {
                        BinaryOp::Add => (g.clone(), g),
                        BinaryOp::Sub => {
                            let gb = g.map(|v| -v);
                            (g, gb)
                        }
                        BinaryOp::Mul => (
                            k::broadcast_binary(&g, bv, |x, y| x * y)?,
                            k::broadcast_binary(&g, av, |x, y| x * y)?,
                        ),
                        BinaryOp::Div => {
                            let ga = k::broadcast_binary(&g, bv, |x, y| x / y)?;
                            // d(a/b)/db = -(a/b)/b
                            let q = k::broadcast_binary(&node.value, bv, |x, y| x / y)?;
                            (ga, k::broadcast_binary(&g, &q, |x, y| -x * y)?)
                        }
                    };
                    if rg(a) {
                        Self::accumulate(&mut grads, a, k::reduce_to_shape(&ga, av.shape()));
                    }
                    if rg(b) {
                        Self::accumulate(&mut grads, b, k::reduce_to_shape(&gb, bv.shape()));
                    }
                }
                Op::Unary(op, x) => {
                    let xv = val(*x);
                    let y = &node.value;
                    let d: Vec<T> = match op {
                        UnaryOp::Neg => g.data().iter().map(|&gv| -gv).collect(),
                        UnaryOp::Abs => g
                            .data()
                            .iter()
                            .zip(xv.data())
                            .map(|(&gv, &xv)| {
                                if xv > T::zero() {
                                    gv
                                } else if xv < T::zero() {
                                    -gv
                                } else {
                                    T::zero()
                                }
                            })
                            .collect(),
                        UnaryOp::Exp => g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect(),
                        UnaryOp::Log => g.data().iter().zip(xv.data()).map(|(&gv, &xv)| gv / xv).collect(),
                        UnaryOp::Sqrt => {
                            let two = T::one() + T::one();
                            g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv / (two * yv)).collect()
                        }
                        UnaryOp::Sigmoid => g
                            .data()
                            .iter()
                            .zip(y.data())
                            .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                            .collect(),
                        UnaryOp::Silu => g
                            .data()
                            .iter()
                            .zip(xv.data())
                            .map(|(&gv, &xv)| {
                                let s = sigmoid(xv);
                                gv * s * (T::one() + xv * (T::one() - s))
                            })
                            .collect(),
                        UnaryOp::Scale(c) => {
                            let c = T::from_f64_lossy(*c);
                            g.data().iter().map(|&gv| gv * c).collect()
                        }
                        UnaryOp::AddScalar(_) => g.into_data(),
                    };
                    Self::accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
                }
                Op::MatMul { a, b, ta, tb, alpha } => {
                    let (da, db) = k::matmul_backward(val(*a), val(*b), *ta, *tb, *alpha, &g, rg(*a), rg(*b));
                    if let Some(da) = da {
                        Self::accumulate(&mut grads, *a, da);
                    }
                    if let Some(db) = db {
                        Self::accumulate(&mut grads, *b, db);
                    }
                }
                Op::Softmax(x) => {
                    let dx = k::softmax_lastdim_backward(&node.value, &g);
                    Self::accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, alpha, stats } => {
                    let (dq, dk, dv) =
                        k::attention_backward(val(*q), val(*k), val(*v), &node.value, stats, *alpha, &g);
                    for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if rg(var) {
                            Self::accumulate(&mut grads, var, d);
                        }
                    }
                }
                Op::Conv2d { x, w, b, stride } => {
                    let need = [rg(*x), rg(*w), b.map(rg).unwrap_or(false)];
                    let cg = k::conv2d_backward(val(*x), val(*w), *stride, &g, need);
                    if let Some(dx) = cg.dx {
                        Self::accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dw) = cg.dw {
                        Self::accumulate(&mut grads, *w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        let shape = val(*b).shape().to_vec();
                        Self::accumulate(&mut grads, *b, db.reshape(&shape)?);
                    }
                }
                Op::Upsample(x) => {
                    let dx = k::upsample_bilinear_backward(val(*x).shape(), &g);
                    Self::accumulate(&mut grads, *x, dx);
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    Self::accumulate(&mut grads, *x, g.reshape(&shape)?);
                }
                Op::Permute(x, perm) => {
                    let dx = k::permute(&g, &k::inverse_permutation(perm))?;
                    Self::accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let ext = val(p).shape()[*axis];
                        if rg(p) {
                            let dp = k::slice_axis(&g, *axis, start, start + ext)?;
                            Self::accumulate(&mut grads, p, dp);
                        }
                        start += ext;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let dx = k::slice_axis_backward(val(*x).shape(), *axis, *start, &g);
                    Self::accumulate(&mut grads, *x, dx);
                }
                Op::SumAxes(x) => {
                    let dx = k::expand_to(&g, val(*x).shape());
                    Self::accumulate(&mut grads, *x, dx);
                }
                Op::Gather(x, order) => {
                    let xv = val(*x);
                    let inner = xv.numel() / xv.shape()[0];
                    let mut dx = Tensor::zeros(xv.shape());
                    for (slot, &src) in order.iter().enumerate() {
                        let gs = &g.data()[slot * inner..(slot + 1) * inner];
                        for (d, &gv) in dx.data_mut()[src * inner..(src + 1) * inner].iter_mut().zip(gs) {
                            *d += gv;
                        }
                    }
                    Self::accumulate(&mut grads, *x, dx);
                }
                Op::Custom(inputs, rule) => {
                    let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                    let gs = rule(&g, &vals);
                    if gs.len() != inputs.len() {
                        return Err(Error::Contract(format!(
                            "custom backward returned {} gradients for {} inputs",
                            gs.len(),
                            inputs.len()
                        )));
                    }
                    for (&v, gv) in inputs.iter().zip(gs) {
                        if rg(v) {
                            if gv.shape() != val(v).shape() {
                                return Err(Error::dim(format!(
                                    "custom backward gradient shape {:?} for input {:?}",
                                    gv.shape(),
                                    val(v).shape()
                                )));
                            }
                            Self::accumulate(&mut grads, v, gv);
                        }
                    }
                }
            }
        }
        // Keep leaf gradients only.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }
}
