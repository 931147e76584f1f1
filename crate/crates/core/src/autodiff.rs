//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as an append-only
//! list of nodes. Inputs always precede their consumers, so a single reverse
//! sweep from the loss node finalizes each gradient before it is read.
//!
//! Parameters are borrowed rather than copied: a tape lives for `'a`, the
//! lifetime of the model it reads from. Embedding tables can be registered
//! with [`Tape::param_rows`], in which case lookups accumulate their gradient
//! into a sparse row map instead of a dense `V×d` buffer.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the output value `y = f(x)`.
    /// The relu subgradient at zero is taken to be zero.
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    LinearRows(Var, Var),
    Binary(BinaryOp, Var, Var),
    Affine(Var, f64),
    Act(Activation, Var),
    Concat(Vec<Var>),
    ConcatCols(Var, Var),
    Stack(Vec<Var>),
    Row(Var, usize),
    Gather(Var, Vec<usize>),
    Conv { input: Var, filters: Var, bias: Var },
    Sum(Var),
    Bce(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatVec(..) => "matvec",
            Op::LinearRows(..) => "linear_rows",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Mul, ..) => "mul",
            Op::Affine(..) => "affine",
            Op::Act(..) => "activation",
            Op::Concat(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Stack(..) => "stack",
            Op::Row(..) => "row",
            Op::Gather(..) => "gather_rows",
            Op::Conv { .. } => "same_length_conv",
            Op::Sum(..) => "sum",
            Op::Bce(..) => "bce",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatVec(a, b)
            | Op::LinearRows(a, b)
            | Op::Binary(_, a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::Act(_, a)
            | Op::Row(a, _)
            | Op::Gather(a, _)
            | Op::Sum(a)
            | Op::Bce(a, _) => vec![*a],
            Op::Concat(parts) | Op::Stack(parts) => parts.clone(),
            Op::Conv {
                input,
                filters,
                bias,
            } => vec![*input, *filters, *bias],
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
    sparse_rows: bool,
}

/// Record of one forward computation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: Vec<Var>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Parameters in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            sparse_rows: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_owned(&mut self, value: Tensor, op: Op) -> Result<Var> {
        self.push(Cow::Owned(value), op)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
            sparse_rows: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A borrowed trainable parameter with a dense gradient.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.leaf_param(value, false)
    }

    /// A borrowed trainable rank-2 parameter whose lookups produce a sparse
    /// per-row gradient.
    pub fn param_rows(&mut self, value: &'a Tensor) -> Var {
        self.leaf_param(value, true)
    }

    fn leaf_param(&mut self, value: &'a Tensor, sparse_rows: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
            sparse_rows,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, p) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for l in 0..k {
                let a_il = ad[i * k + l];
                for j in 0..p {
                    out[i * p + j] += a_il * bd[l * p + j];
                }
            }
        }
        let t = Tensor::new(vec![m, p], out)?;
        self.push_owned(t, Op::MatMul(a, b))
    }

    /// `W·x` for `W: [m×k]`, `x: [k]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        if wv.rank() != 2 || xv.rank() != 1 || wv.shape()[1] != xv.shape()[0] {
            return Err(Error::shape("matvec", wv.shape(), xv.shape()));
        }
        let (m, k) = (wv.shape()[0], wv.shape()[1]);
        let out = (0..m)
            .map(|i| dot(&wv.data()[i * k..(i + 1) * k], xv.data()))
            .collect();
        let t = Tensor::new(vec![m], out)?;
        self.push_owned(t, Op::MatVec(w, x))
    }

    /// Row-wise `x·Wᵀ` for `x: [n×k]`, `W: [m×k]`; row `t` equals `matvec(W, x[t])`.
    pub fn linear_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 2 || wv.rank() != 2 || xv.shape()[1] != wv.shape()[1] {
            return Err(Error::shape("linear_rows", xv.shape(), wv.shape()));
        }
        let (n, k, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut out = Vec::with_capacity(n * m);
        for t in 0..n {
            let row = &xv.data()[t * k..(t + 1) * k];
            for i in 0..m {
                out.push(dot(&wv.data()[i * k..(i + 1) * k], row));
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push_owned(t, Op::LinearRows(x, w))
    }

    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            let name = match op {
                BinaryOp::Add => "add",
                BinaryOp::Sub => "sub",
                BinaryOp::Mul => "mul",
            };
            return Err(Error::shape(name, av.shape(), bv.shape()));
        }
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let out = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        self.push_owned(t, Op::Binary(op, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    /// `scale·x + shift`, the only scalar-with-tensor form supported.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| scale * v + shift).collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_owned(t, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        if kind == Activation::Identity {
            return Ok(x);
        }
        let xv = self.value(x);
        let out = xv.data().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push_owned(t, Op::Act(kind, x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one part".into()))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let trailing = self.value(first).shape()[1..].to_vec();
        let mut leading = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.shape()[1..] != trailing[..] {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(first).shape(),
                    pv.shape(),
                ));
            }
            leading += pv.shape()[0];
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![leading];
        shape.extend(trailing);
        let t = Tensor::new(shape, data)?;
        self.push_owned(t, Op::Concat(parts.to_vec()))
    }

    /// Concatenation of two matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::shape("concat_cols", av.shape(), bv.shape()));
        }
        let (n, ca, cb) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut data = Vec::with_capacity(n * (ca + cb));
        for t in 0..n {
            data.extend_from_slice(av.row(t));
            data.extend_from_slice(bv.row(t));
        }
        let t = Tensor::new(vec![n, ca + cb], data)?;
        self.push_owned(t, Op::ConcatCols(a, b))
    }

    /// Stacks equally sized vectors into the rows of a matrix.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("stack needs at least one part".into()))?;
        let shape = self.value(first).shape().to_vec();
        if shape.len() != 1 {
            return Err(Error::shape("stack", &shape, &[]));
        }
        let mut data = Vec::with_capacity(parts.len() * shape[0]);
        for &p in parts {
            let pv = self.value(p);
            if pv.shape() != shape.as_slice() {
                return Err(Error::shape("stack", &shape, pv.shape()));
            }
            data.extend_from_slice(pv.data());
        }
        let t = Tensor::new(vec![parts.len(), shape[0]], data)?;
        self.push_owned(t, Op::Stack(parts.to_vec()))
    }

    /// Row `i` of a rank-2 or rank-3 tensor.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::shape("row", xv.shape(), &[]));
        }
        if i >= xv.rows() {
            return Err(Error::Index {
                what: "row",
                index: i,
                len: xv.rows(),
            });
        }
        let t = Tensor::new(xv.shape()[1..].to_vec(), xv.row(i).to_vec())?;
        self.push_owned(t, Op::Row(x, i))
    }

    /// Rows `ids` of a matrix, in order; ids may repeat.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("gather_rows", xv.shape(), &[]));
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one id".into()));
        }
        let (v, d) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(xv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        self.push_owned(t, Op::Gather(x, ids.to_vec()))
    }

    /// Same-length 1-D convolution over the leading axis with symmetric zero
    /// padding of `(k-1)/2` rows. `filters` is `[d_out×k×d_in]`, `bias` is `[d_out]`.
    /// No nonlinearity is applied here.
    pub fn conv_same(&mut self, input: Var, filters: Var, bias: Var) -> Result<Var> {
        let (iv, fv, bv) = (self.value(input), self.value(filters), self.value(bias));
        if fv.rank() != 3 {
            return Err(Error::shape("same_length_conv", fv.shape(), &[]));
        }
        let (d_out, k, d_in) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("filter length must be odd, got {k}")));
        }
        if iv.rank() != 2 || iv.shape()[1] != d_in {
            return Err(Error::shape("same_length_conv", iv.shape(), fv.shape()));
        }
        if bv.shape() != [d_out] {
            return Err(Error::shape("same_length_conv", bv.shape(), &[d_out]));
        }
        let n = iv.shape()[0];
        let pad = (k - 1) / 2;
        let (id, fd) = (iv.data(), fv.data());
        let mut out = Vec::with_capacity(n * d_out);
        for i in 0..n {
            for o in 0..d_out {
                let mut acc = bv.data()[o];
                for j in 0..k {
                    let Some(src) = (i + j).checked_sub(pad).filter(|&s| s < n) else {
                        continue;
                    };
                    let w = &fd[(o * k + j) * d_in..(o * k + j + 1) * d_in];
                    acc += dot(w, &id[src * d_in..(src + 1) * d_in]);
                }
                out.push(acc);
            }
        }
        let t = Tensor::new(vec![n, d_out], out)?;
        self.push_owned(
            t,
            Op::Conv {
                input,
                filters,
                bias,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push_owned(Tensor::scalar(s), Op::Sum(x))
    }

    /// Binary cross-entropy of a single probability against a 0/1 target.
    pub fn bce(&mut self, p: Var, target: f64) -> Result<Var> {
        let pv = self.value(p);
        if pv.numel() != 1 {
            return Err(Error::shape("bce", pv.shape(), &[1]));
        }
        let q = pv.item().clamp(BCE_EPS, 1.0 - BCE_EPS);
        let loss = -(target * q.ln() + (1.0 - target) * (1.0 - q).ln());
        self.push_owned(Tensor::scalar(loss), Op::Bce(p, target))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a single-element loss, got shape {:?}",
                lv.shape()
            )));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; end];
        let mut rows: BTreeMap<usize, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..end).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = Accumulator {
                nodes: &self.nodes,
                grads: &mut grads,
                current: i,
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, p) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    acc.with(*a, |da| {
                        for i in 0..m {
                            for l in 0..k {
                                da[i * k + l] +=
                                    dot(&g[i * p..(i + 1) * p], &bv.data()[l * p..(l + 1) * p]);
                            }
                        }
                    });
                    acc.with(*b, |db| {
                        for i in 0..m {
                            for l in 0..k {
                                let a_il = av.data()[i * k + l];
                                for j in 0..p {
                                    db[l * p + j] += a_il * g[i * p + j];
                                }
                            }
                        }
                    });
                }
                Op::MatVec(w, x) => {
                    let (wv, xv) = (self.value(*w), self.value(*x));
                    let k = wv.shape()[1];
                    acc.with(*w, |dw| {
                        for (i, gi) in g.iter().enumerate() {
                            axpy(*gi, xv.data(), &mut dw[i * k..(i + 1) * k]);
                        }
                    });
                    acc.with(*x, |dx| {
                        for (i, gi) in g.iter().enumerate() {
                            axpy(*gi, &wv.data()[i * k..(i + 1) * k], dx);
                        }
                    });
                }
                Op::LinearRows(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, k, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                    acc.with(*x, |dx| {
                        for t in 0..n {
                            for i in 0..m {
                                axpy(
                                    g[t * m + i],
                                    &wv.data()[i * k..(i + 1) * k],
                                    &mut dx[t * k..(t + 1) * k],
                                );
                            }
                        }
                    });
                    acc.with(*w, |dw| {
                        for t in 0..n {
                            for i in 0..m {
                                axpy(g[t * m + i], xv.row(t), &mut dw[i * k..(i + 1) * k]);
                            }
                        }
                    });
                }
                Op::Binary(op, a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    match op {
                        BinaryOp::Add => {
                            acc.with(*a, |da| axpy(1.0, &g, da));
                            acc.with(*b, |db| axpy(1.0, &g, db));
                        }
                        BinaryOp::Sub => {
                            acc.with(*a, |da| axpy(1.0, &g, da));
                            acc.with(*b, |db| axpy(-1.0, &g, db));
                        }
                        BinaryOp::Mul => {
                            acc.with(*a, |da| {
                                for ((d, gi), y) in da.iter_mut().zip(&g).zip(bv.data()) {
                                    *d += gi * y;
                                }
                            });
                            acc.with(*b, |db| {
                                for ((d, gi), x) in db.iter_mut().zip(&g).zip(av.data()) {
                                    *d += gi * x;
                                }
                            });
                        }
                    }
                }
                Op::Affine(x, scale) => acc.with(*x, |dx| axpy(*scale, &g, dx)),
                Op::Act(kind, x) => {
                    let y = node.value.data();
                    acc.with(*x, |dx| {
                        for ((d, gi), yi) in dx.iter_mut().zip(&g).zip(y) {
                            *d += gi * kind.derivative_at_output(*yi);
                        }
                    });
                }
                Op::Concat(parts) | Op::Stack(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).numel();
                        acc.with(*p, |dp| axpy(1.0, &g[offset..offset + len], dp));
                        offset += len;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.value(*a).shape()[1], self.value(*b).shape()[1]);
                    let n = self.value(*a).shape()[0];
                    let w = ca + cb;
                    acc.with(*a, |da| {
                        for t in 0..n {
                            axpy(1.0, &g[t * w..t * w + ca], &mut da[t * ca..(t + 1) * ca]);
                        }
                    });
                    acc.with(*b, |db| {
                        for t in 0..n {
                            axpy(
                                1.0,
                                &g[t * w + ca..(t + 1) * w],
                                &mut db[t * cb..(t + 1) * cb],
                            );
                        }
                    });
                }
                Op::Row(x, r) => {
                    let w = g.len();
                    acc.with(*x, |dx| axpy(1.0, &g, &mut dx[r * w..(r + 1) * w]));
                }
                Op::Gather(x, ids) => {
                    let d = self.value(*x).shape()[1];
                    if self.nodes[x.0].sparse_rows {
                        let map = rows.entry(x.0).or_default();
                        for (t, &id) in ids.iter().enumerate() {
                            let dst = map.entry(id).or_insert_with(|| vec![0.0; d]);
                            axpy(1.0, &g[t * d..(t + 1) * d], dst);
                        }
                    } else {
                        acc.with(*x, |dx| {
                            for (t, &id) in ids.iter().enumerate() {
                                axpy(1.0, &g[t * d..(t + 1) * d], &mut dx[id * d..(id + 1) * d]);
                            }
                        });
                    }
                }
                Op::Conv {
                    input,
                    filters,
                    bias,
                } => {
                    let (iv, fv) = (self.value(*input), self.value(*filters));
                    let (d_out, k, d_in) = (fv.shape()[0], fv.shape()[1], fv.shape()[2]);
                    let n = iv.shape()[0];
                    let pad = (k - 1) / 2;
                    let taps = |i: usize, j: usize| (i + j).checked_sub(pad).filter(|&s| s < n);
                    acc.with(*input, |de| {
                        for i in 0..n {
                            for o in 0..d_out {
                                let go = g[i * d_out + o];
                                for j in 0..k {
                                    if let Some(src) = taps(i, j) {
                                        let w =
                                            &fv.data()[(o * k + j) * d_in..(o * k + j + 1) * d_in];
                                        axpy(go, w, &mut de[src * d_in..(src + 1) * d_in]);
                                    }
                                }
                            }
                        }
                    });
                    acc.with(*filters, |df| {
                        for i in 0..n {
                            for o in 0..d_out {
                                let go = g[i * d_out + o];
                                for j in 0..k {
                                    if let Some(src) = taps(i, j) {
                                        let base = (o * k + j) * d_in;
                                        axpy(go, iv.row(src), &mut df[base..base + d_in]);
                                    }
                                }
                            }
                        }
                    });
                    acc.with(*bias, |db| {
                        for i in 0..n {
                            axpy(1.0, &g[i * d_out..(i + 1) * d_out], db);
                        }
                    });
                }
                Op::Sum(x) => acc.with(*x, |dx| dx.iter_mut().for_each(|d| *d += g[0])),
                Op::Bce(p, y) => {
                    let q = self.value(*p).item();
                    let slope = if (BCE_EPS..=1.0 - BCE_EPS).contains(&q) {
                        -y / q + (1.0 - y) / (1.0 - q)
                    } else {
                        0.0
                    };
                    acc.with(*p, |dp| dp[0] += g[0] * slope);
                }
            }
        }

        let mut leaf_grads = BTreeMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if matches!(self.nodes[i].op, Op::Leaf) {
                    leaf_grads.insert(i, g);
                }
            }
        }
        let shapes = self.nodes[..end]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients {
            dense: leaf_grads,
            rows,
            shapes,
        })
    }
}

struct Accumulator<'t, 'a> {
    nodes: &'t [Node<'a>],
    grads: &'t mut [Option<Vec<f64>>],
    current: usize,
}

impl Accumulator<'_, '_> {
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        debug_assert!(v.0 < self.current, "tape is not topologically ordered");
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(buf);
    }
}

/// Gradient of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    Dense(Tensor),
    /// Only the listed rows are non-zero.
    Rows {
        shape: Vec<usize>,
        rows: BTreeMap<usize, Vec<f64>>,
    },
    Zero(Vec<usize>),
}

impl ParamGrad {
    pub fn to_dense(&self) -> Tensor {
        match self {
            ParamGrad::Dense(t) => t.clone(),
            ParamGrad::Zero(shape) => Tensor::zeros(shape.clone()),
            ParamGrad::Rows { shape, rows } => {
                let mut t = Tensor::zeros(shape.clone());
                let d = shape[1];
                for (&r, g) in rows {
                    t.data_mut()[r * d..(r + 1) * d].copy_from_slice(g);
                }
                t
            }
        }
    }
}

/// Result of [`Tape::backward`]: gradients of the leaves reachable from the loss.
#[derive(Debug)]
pub struct Gradients {
    dense: BTreeMap<usize, Vec<f64>>,
    rows: BTreeMap<usize, BTreeMap<usize, Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Whether `v` received any gradient.
    pub fn reached(&self, v: Var) -> bool {
        self.dense.contains_key(&v.0) || self.rows.contains_key(&v.0)
    }

    pub fn param_grad(&self, v: Var) -> ParamGrad {
        let Some(shape) = self.shapes.get(v.0).cloned() else {
            // Leaf created after the loss node: unreachable.
            return ParamGrad::Zero(Vec::new());
        };
        match (self.dense.get(&v.0), self.rows.get(&v.0)) {
            (None, None) => ParamGrad::Zero(shape),
            (Some(d), None) => ParamGrad::Dense(Tensor::new(shape, d.clone()).expect("grad shape")),
            (None, Some(r)) => ParamGrad::Rows {
                shape,
                rows: r.clone(),
            },
            (Some(d), Some(r)) => {
                let mut t = Tensor::new(shape.clone(), d.clone()).expect("grad shape");
                let w = shape[1];
                for (&i, g) in r {
                    axpy(1.0, g, &mut t.data_mut()[i * w..(i + 1) * w]);
                }
                ParamGrad::Dense(t)
            }
        }
    }

    /// Dense gradient of a leaf, zeros when unreached.
    pub fn get(&self, v: Var) -> Tensor {
        self.param_grad(v).to_dense()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let c = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 1]);
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn elementwise_values_and_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let z = tape.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
        let m = tape.mul(a, z).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, 0.0, 0.0]);

        let x = tape.constant(Tensor::vector(&[1.0, 2.0]));
        let y = tape.constant(Tensor::vector(&[3.0, 4.0]));
        let s = tape.add(x, y).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        assert!(matches!(tape.add(a, x), Err(Error::Shape { .. })));
    }

    #[test]
    fn activations_at_known_points() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(zero).unwrap();
        let t = tape.tanh(zero).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
        assert_eq!(tape.value(t).item(), 0.0);
        let x = tape.constant(Tensor::vector(&[-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let x = Tensor::vector(&[0.0, 1.0, -1.0]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let r = tape.relu(xv).unwrap();
        let l = tape.sum(r).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(xv).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(Activation::Sigmoid.apply(-1000.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(1000.0), 1.0);
    }

    #[test]
    fn concat_rows_cases() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![2.0]]).unwrap());
        let c = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0]);
        assert_eq!(tape.concat_rows(&[a]).unwrap(), a);
        let wide = tape.constant(Tensor::zeros(vec![1, 2]));
        assert!(matches!(
            tape.concat_rows(&[a, wide]),
            Err(Error::Shape { .. })
        ));
        assert!(tape.concat_rows(&[]).is_err());
    }

    #[test]
    fn backward_identity_and_square() {
        let x = Tensor::scalar(3.0);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let g = tape.backward(xv).unwrap();
        assert_eq!(g.get(xv).item(), 1.0);

        let x = Tensor::vector(&[1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(close(g.get(xv).data(), &[2.0, -4.0, 1.0], 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        assert!(matches!(tape.backward(xv), Err(Error::Contract(_))));
    }

    #[test]
    fn only_reachable_leaves_get_gradients() {
        let (a, b) = (Tensor::scalar(1.0), Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let av = tape.param(&a);
        let bv = tape.param(&b);
        let l = tape.scale(av, 3.0).unwrap();
        let _unused = tape.scale(bv, 2.0).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.reached(av));
        assert!(!g.reached(bv));
        assert_eq!(g.get(av).item(), 3.0);
    }

    #[test]
    fn sparse_rows_accumulate_repeated_ids() {
        let table = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0]]).unwrap();
        let mut tape = Tape::new();
        let t = tape.param_rows(&table);
        let e = tape.gather_rows(t, &[0, 0]).unwrap();
        let w = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let m = tape.mul(e, w).unwrap();
        let l = tape.sum(m).unwrap();
        let g = tape.backward(l).unwrap();
        match g.param_grad(t) {
            ParamGrad::Rows { rows, .. } => {
                assert_eq!(rows.len(), 1);
                assert_eq!(rows[&0], vec![4.0, 6.0]);
            }
            other => panic!("expected sparse rows, got {other:?}"),
        }
        assert_eq!(g.get(t).data(), &[4.0, 6.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_out_of_range_is_index_error() {
        let table = Tensor::zeros(vec![2, 2]);
        let mut tape = Tape::new();
        let t = tape.param_rows(&table);
        assert!(matches!(
            tape.gather_rows(t, &[2]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn conv_hand_oracle() {
        // d=1, k=3, filter [1,1,1], zero padding.
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let f = tape.constant(Tensor::new(vec![1, 3, 1], vec![1.0, 1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::vector(&[0.0]));
        let c = tape.conv_same(e, f, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn conv_rejects_even_window() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(vec![3, 1]));
        let f = tape.constant(Tensor::zeros(vec![1, 2, 1]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        assert!(matches!(tape.conv_same(e, f, b), Err(Error::Config(_))));
    }

    #[test]
    fn bce_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::scalar(0.5));
        let l0 = tape.bce(p, 0.0).unwrap();
        let l1 = tape.bce(p, 1.0).unwrap();
        assert!((tape.value(l0).item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((tape.value(l1).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let one = tape.constant(Tensor::scalar(1.0));
        let l = tape.bce(one, 1.0).unwrap();
        let v = tape.value(l).item();
        assert!(v > 0.0 && v < 2e-7, "{v}");
    }
}
