use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::numeric;
use super::Tensor;
use crate::{Error, Result};

/// Smallest divisor magnitude accepted by [`Graph::div`].
const MIN_DIVISOR: f64 = 1e-300;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Relu,
    Exp,
    Log,
    Neg,
    Scale(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Softmax { input: Var, temperature: f64 },
    LogSoftmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Sum(Var),
    StopGradient,
    StraightThrough { soft: Var },
    Select { input: Var, index: usize },
    Expand(Var),
    ExpandRows(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of primitive operations.
///
/// Inputs always precede their consumers, so insertion order is a valid
/// topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        let value = finite("constant", value)?;
        Ok(self.push(value, Op::Leaf, false))
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        let value = finite("param", value)?;
        Ok(self.push(value, Op::Leaf, true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let value = finite("matmul", Tensor::matrix(m, n, out)?)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "elementwise",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        if kind == BinaryKind::Div {
            if let Some(x) = bv.data().iter().find(|x| libm::fabs(**x) < MIN_DIVISOR) {
                return Err(Error::Domain {
                    op: "div",
                    detail: format!("divisor {x:e} below {MIN_DIVISOR:e}"),
                });
            }
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            })
            .collect();
        let value = finite("elementwise", Tensor::new(av.shape().to_vec(), data)?)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Div)
    }

    pub fn unary(&mut self, a: Var, kind: UnaryKind) -> Result<Var> {
        let av = self.value(a);
        if kind == UnaryKind::Log {
            if let Some(x) = av.data().iter().find(|x| **x <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("nonpositive input {x:e}"),
                });
            }
        }
        let data = av
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Relu => {
                    if x > 0.0 {
                        x
                    } else {
                        0.0
                    }
                }
                UnaryKind::Exp => libm::exp(x),
                UnaryKind::Log => libm::log(x),
                UnaryKind::Neg => -x,
                UnaryKind::Scale(c) => c * x,
            })
            .collect();
        let value = finite("unary", Tensor::new(av.shape().to_vec(), data)?)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Unary(kind, a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Log)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryKind::Neg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, UnaryKind::Scale(c))
    }

    fn require_vector(&self, op: &'static str, a: Var) -> Result<()> {
        let s = self.value(a).shape();
        if s.len() != 1 {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok(())
    }

    /// `softmax(a / temperature)` over a vector.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        self.require_vector("softmax", a)?;
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Domain {
                op: "softmax",
                detail: format!("temperature {temperature} must be positive"),
            });
        }
        let data = numeric::softmax(self.value(a).data(), temperature);
        let value = finite("softmax", Tensor::vector(data))?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Softmax { input: a, temperature }, rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.require_vector("log_softmax", a)?;
        let data = numeric::log_softmax(self.value(a).data());
        let value = finite("log_softmax", Tensor::vector(data))?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits` (batch x classes).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let classes = lv.cols();
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::Index {
                    index: label,
                    len: classes,
                });
            }
            let row = lv.row(r);
            total += numeric::log_sum_exp(row) - row[label];
        }
        let value = finite("cross_entropy", Tensor::scalar(total / labels.len() as f64))?;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let value = finite("sum", Tensor::scalar(s))?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    /// Forward identity; contributes nothing to the input's gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).clone();
        Ok(self.push(value, Op::StopGradient, false))
    }

    /// Straight-through coupling: the forward value is exactly `hard`, the
    /// backward pass hands the incoming gradient to `soft` unchanged. This is
    /// `soft + stop_gradient(hard - soft)` without the rounding of the two
    /// floating-point additions.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        let sv = self.value(soft);
        if sv.shape() != hard.shape() {
            return Err(Error::Shape {
                op: "straight_through",
                lhs: hard.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        let value = finite("straight_through", hard)?;
        let rg = self.needs(&[soft]);
        Ok(self.push(value, Op::StraightThrough { soft }, rg))
    }

    /// Entry `index` of a vector, as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        self.require_vector("select", a)?;
        let av = self.value(a);
        if index >= av.len() {
            return Err(Error::Index {
                index,
                len: av.len(),
            });
        }
        let value = Tensor::scalar(av.data()[index]);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Select { input: a, index }, rg))
    }

    /// Spreads a single-element tensor over `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a).item().ok_or_else(|| Error::Shape {
            op: "expand",
            lhs: self.value(a).shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let value = Tensor::new(shape.to_vec(), vec![x; shape.iter().product()])?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Expand(a), rg))
    }

    /// Repeats a length-n vector as `rows` rows of an `rows x n` matrix.
    pub fn expand_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.require_vector("expand_rows", a)?;
        let av = self.value(a);
        let mut data = Vec::with_capacity(rows * av.len());
        for _ in 0..rows {
            data.extend_from_slice(av.data());
        }
        let value = Tensor::matrix(rows, av.len(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::ExpandRows(a), rg))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let value = Tensor::new(shape.to_vec(), av.data().to_vec()).map_err(|_| Error::Shape {
            op: "reshape",
            lhs: av.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one input"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            widths.push(pv.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        let rg = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Reverse pass from a single-element `loss`.
    ///
    /// Every `requires_grad` leaf gets an entry in the result; leaves with no
    /// path to `loss` get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &mut |g| {
                    // dA = dC . B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += up[i * n + j] * bv.data()[p * n + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                acc(*b, &mut |g| {
                    // dB = A^T . dC
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av.data()[i * k + p] * up[i * n + j];
                            }
                            g[p * n + j] += s;
                        }
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let kind = *kind;
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => up[i],
                            BinaryKind::Mul => up[i] * bv[i],
                            BinaryKind::Div => up[i] / bv[i],
                        };
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += match kind {
                            BinaryKind::Add => up[i],
                            BinaryKind::Sub => -up[i],
                            BinaryKind::Mul => up[i] * av[i],
                            BinaryKind::Div => -up[i] * av[i] / (bv[i] * bv[i]),
                        };
                    }
                });
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let kind = *kind;
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += match kind {
                            UnaryKind::Relu => {
                                if x[i] > 0.0 {
                                    up[i]
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Exp => up[i] * y[i],
                            UnaryKind::Log => up[i] / x[i],
                            UnaryKind::Neg => -up[i],
                            UnaryKind::Scale(c) => c * up[i],
                        };
                    }
                });
            }
            Op::Softmax { input, temperature } => {
                let y = node.value.data();
                let dot: f64 = up.iter().zip(y).map(|(u, p)| u * p).sum();
                let t = *temperature;
                acc(*input, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += y[i] * (up[i] - dot) / t;
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let p = numeric::softmax(self.value(*a).data(), 1.0);
                let total: f64 = up.iter().sum();
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += up[i] - p[i] * total;
                    }
                });
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let classes = lv.cols();
                let scale = up[0] / labels.len() as f64;
                acc(*logits, &mut |g| {
                    for (r, &label) in labels.iter().enumerate() {
                        let p = numeric::softmax(lv.row(r), 1.0);
                        for c in 0..classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            g[r * classes + c] += scale * (p[c] - onehot);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += up[0])),
            Op::StraightThrough { soft } => acc(*soft, &mut |g| {
                for i in 0..g.len() {
                    g[i] += up[i];
                }
            }),
            Op::Select { input, index } => acc(*input, &mut |g| g[*index] += up[0]),
            Op::Expand(a) => {
                let s: f64 = up.iter().sum();
                acc(*a, &mut |g| g[0] += s);
            }
            Op::ExpandRows(a) => acc(*a, &mut |g| {
                let n = g.len();
                for (i, u) in up.iter().enumerate() {
                    g[i % n] += u;
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |g| {
                for (d, u) in g.iter_mut().zip(up) {
                    *d += u;
                }
            }),
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    acc(*p, &mut |g| {
                        for r in 0..rows {
                            for c in 0..w {
                                g[r * w + c] += up[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, &y) in dst.iter_mut().zip(row) {
                *d += x * y;
            }
        }
    }
    out
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if `v` requires gradients.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, or zeros of length `len`.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}
