use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Named parameter tensors; the ordering is stable so iteration is deterministic.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Parameter handles produced by [`Tape::bind`].
pub type Bound = BTreeMap<String, Var>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Softplus,
    Exp,
    Log,
    Square,
    Sqrt,
    Neg,
    Recip,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Neg => "neg",
            Unary::Recip => "recip",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Neg => -x,
            Unary::Recip => 1.0 / x,
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Neg => -1.0,
            Unary::Recip => -y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

/// How the second operand of a binary op lines up with the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand is repeated over the left operand's leading axis.
    Right,
    /// Left operand is repeated over the right operand's leading axis.
    Left,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    Binary(Binary, Broadcast, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowScale(Var, Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so the
/// creation order is a valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn checked(op: &'static str, value: Tensor) -> Result<Tensor> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn strides(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

/// c (m×n) = a (m×k) · b (k×n)
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// c (m×k) += a (m×n) · bᵀ where b is (k×n)
fn matmul_bt_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// c (k×n) += aᵀ · b where a is (m×k), b is (m×n)
fn matmul_at_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    /// Registers a trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(Op::Param(name.into()), value)
    }

    pub fn bind(&mut self, params: &ParamSet) -> Bound {
        params
            .iter()
            .map(|(name, t)| (name.clone(), self.param(name.clone(), t.clone())))
            .collect()
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = if sa == sb {
            Broadcast::Same
        } else if !sa.is_empty() && &sa[1..] == sb {
            Broadcast::Right
        } else if !sb.is_empty() && &sb[1..] == sa {
            Broadcast::Left
        } else {
            return Err(shape_err(kind.name(), sa, sb));
        };
        let (va, vb) = (self.value(a), self.value(b));
        let value = match bc {
            Broadcast::Same => {
                let data = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| kind.apply(x, y))
                    .collect();
                Tensor::new(va.shape().to_vec(), data)?
            }
            Broadcast::Right => {
                let n = vb.numel();
                let data = va
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| kind.apply(x, vb.data()[i % n]))
                    .collect();
                Tensor::new(va.shape().to_vec(), data)?
            }
            Broadcast::Left => {
                let n = va.numel();
                let data = vb
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| kind.apply(va.data()[i % n], y))
                    .collect();
                Tensor::new(vb.shape().to_vec(), data)?
            }
        };
        let value = checked(kind.name(), value)?;
        Ok(self.push(Op::Binary(kind, bc, a, b), value))
    }

    /// Elementwise sum; `b` may omit `a`'s leading batch axis (and vice versa).
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

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let value = checked(kind.name(), self.value(a).map(|x| kind.apply(x)))?;
        Ok(self.push(Op::Unary(kind, a), value))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Recip, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = checked("scale", self.value(a).map(|x| x * c))?;
        Ok(self.push(Op::Scale(a, c), value))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = checked("add_scalar", self.value(a).map(|x| x + c))?;
        Ok(self.push(Op::AddScalar(a), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = checked("matmul", Tensor::new(vec![m, n], out)?)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(shape_err("transpose", sa, &[]));
        }
        let (m, n) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, inner) = strides(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
        ))
    }

    /// `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start > end || end > sa[axis] {
            return Err(shape_err("slice", &sa, &[axis, start, end]));
        }
        let (outer, inner) = strides(&sa, axis);
        let src = self.value(a).data();
        let width = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let off = o * sa[axis] * inner + start * inner;
            out.extend_from_slice(&src[off..off + width]);
        }
        let mut shape = sa;
        shape[axis] = end - start;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            Op::Slice {
                input: a,
                axis,
                start,
            },
            value,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = checked("sum", Tensor::scalar(self.value(a).sum()))?;
        Ok(self.push(Op::Sum(a), value))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(contract("mean of an empty tensor"));
        }
        let value = checked("mean", Tensor::scalar(t.sum() / t.numel() as f64))?;
        Ok(self.push(Op::Mean(a), value))
    }

    /// Sums a 2-D tensor over its last axis, giving an (m, 1) column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(shape_err("row_sum", sa, &[]));
        }
        let (m, n) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let out = (0..m).map(|i| src[i * n..(i + 1) * n].iter().sum()).collect();
        let value = checked("row_sum", Tensor::new(vec![m, 1], out)?)?;
        Ok(self.push(Op::RowSum(a), value))
    }

    /// Multiplies row `i` of an (m, n) tensor by `s[i]`, where `s` is (m, 1).
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (sa, ss) = (self.shape(a), self.shape(s));
        if sa.len() != 2 || ss != [sa[0], 1] {
            return Err(shape_err("row_scale", sa, ss));
        }
        let n = sa[1];
        let (src, sc) = (self.value(a).data(), self.value(s).data());
        let out = src.iter().enumerate().map(|(i, &x)| x * sc[i / n]).collect();
        let value = checked("row_scale", Tensor::new(sa.to_vec(), out)?)?;
        Ok(self.push(Op::RowScale(a, s), value))
    }

    /// `x · wᵀ + b` for `x` (batch, in), `w` (out, in), `b` (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        let xw = self.matmul(x, wt)?;
        self.add(xw, b)
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<ParamSet> {
        if self.value(loss).numel() != 1 {
            return Err(contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        let mut grads = ParamSet::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => match grads.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        grads.insert(name.clone(), g);
                    }
                },
                Op::Binary(kind, bc, a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let gd = g.data();
                    let (na, nb) = (va.len(), vb.len());
                    let mut ga = vec![0.0; na];
                    let mut gb = vec![0.0; nb];
                    for (i, &gi) in gd.iter().enumerate() {
                        let (ia, ib) = match bc {
                            Broadcast::Same => (i, i),
                            Broadcast::Right => (i, i % nb),
                            Broadcast::Left => (i % na, i),
                        };
                        let (x, y) = (va[ia], vb[ib]);
                        let (da, db) = match kind {
                            Binary::Add => (1.0, 1.0),
                            Binary::Sub => (1.0, -1.0),
                            Binary::Mul => (y, x),
                            Binary::Div => (1.0 / y, -x / (y * y)),
                        };
                        ga[ia] += gi * da;
                        gb[ib] += gi * db;
                    }
                    accumulate(&mut adj, *a, self.value(*a).shape(), ga);
                    accumulate(&mut adj, *b, self.value(*b).shape(), gb);
                }
                Op::Unary(kind, a) => {
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let ga = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * kind.derivative(x[i], y[i]))
                        .collect();
                    accumulate(&mut adj, *a, self.value(*a).shape(), ga);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_into(g.data(), tb.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_at_into(ta.data(), g.data(), &mut gb, m, k, n);
                    accumulate(&mut adj, *a, ta.shape(), ga);
                    accumulate(&mut adj, *b, tb.shape(), gb);
                }
                Op::Transpose(a) => {
                    let s = g.shape();
                    let (n, m) = (s[0], s[1]);
                    let mut ga = vec![0.0; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            ga[i * n + j] = g.data()[j * m + i];
                        }
                    }
                    accumulate(&mut adj, *a, self.value(*a).shape(), ga);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, inner) = strides(g.shape(), *axis);
                    let total = g.shape()[*axis];
                    let mut offset = 0;
                    for v in inputs {
                        let s = self.value(*v).shape();
                        let width = s[*axis] * inner;
                        let mut gv = Vec::with_capacity(outer * width);
                        for o in 0..outer {
                            let base = o * total * inner + offset;
                            gv.extend_from_slice(&g.data()[base..base + width]);
                        }
                        offset += width;
                        accumulate(&mut adj, *v, s, gv);
                    }
                }
                Op::Slice { input, axis, start } => {
                    let s = self.value(*input).shape();
                    let (outer, inner) = strides(s, *axis);
                    let width = g.shape()[*axis] * inner;
                    let mut ga = vec![0.0; self.value(*input).numel()];
                    for o in 0..outer {
                        let off = o * s[*axis] * inner + start * inner;
                        ga[off..off + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
                    }
                    accumulate(&mut adj, *input, s, ga);
                }
                Op::Scale(a, c) => {
                    let ga = g.data().iter().map(|x| x * c).collect();
                    accumulate(&mut adj, *a, self.value(*a).shape(), ga);
                }
                Op::AddScalar(a) => {
                    accumulate(&mut adj, *a, self.value(*a).shape(), g.into_data());
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut adj, *a, self.value(*a).shape(), vec![g.data()[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    let gi = g.data()[0] / n as f64;
                    accumulate(&mut adj, *a, self.value(*a).shape(), vec![gi; n]);
                }
                Op::RowSum(a) => {
                    let s = self.value(*a).shape();
                    let n = s[1];
                    let ga = (0..s[0] * n).map(|i| g.data()[i / n]).collect();
                    accumulate(&mut adj, *a, s, ga);
                }
                Op::RowScale(a, sv) => {
                    let (ta, ts) = (self.value(*a), self.value(*sv));
                    let n = ta.shape()[1];
                    let mut ga = vec![0.0; ta.numel()];
                    let mut gs = vec![0.0; ts.numel()];
                    for (i, &gi) in g.data().iter().enumerate() {
                        ga[i] = gi * ts.data()[i / n];
                        gs[i / n] += gi * ta.data()[i];
                    }
                    accumulate(&mut adj, *a, ta.shape(), ga);
                    accumulate(&mut adj, *sv, ts.shape(), gs);
                }
            }
        }
        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                grads
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("adjoint shape matches value"));
        }
    }
}
