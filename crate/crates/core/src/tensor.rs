//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Graph`] is an append-only tape. Every op reads existing nodes and pushes a
//! new one, so node ids are already in topological order and `backward` is a single
//! reverse sweep. Values are computed eagerly when an op is recorded.
//!
//! Broadcasting is restricted to the leading-batch case: the smaller operand's shape
//! must be a suffix of the larger one's (a `[d]` bias against a `[n, d]` batch, or a
//! `[]` scalar against anything).
//!
//! Leaf gradients accumulate across `backward` calls until [`Graph::zero_grad`].

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `[rows.len(), width]` matrix. All rows must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![width],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), width], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension (1 for a scalar).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Size of the last axis (1 for a scalar).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` of a matrix (or the whole slab `i` of a higher-rank tensor).
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.len() / self.rows().max(1);
        &self.data[i * w..(i + 1) * w]
    }

    /// Copies the listed rows (leading-axis slabs) into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let w = if self.rows() == 0 { 0 } else { self.len() / self.rows() };
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Tensor { shape, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Powf(Var, f64),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleGrad(Var, f64),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    Broadcast(Var),
    MaskSelect(Var, Vec<usize>),
    Concat(Vec<Var>),
    LogSoftmax(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Powf(a, _)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::ScaleGrad(a, _)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::SumAll(a)
            | Op::Broadcast(a)
            | Op::MaskSelect(a, _)
            | Op::LogSoftmax(a) => vec![*a],
            Op::Concat(vs) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of named leaves, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.by_name.values().all(Tensor::is_finite)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, Var>,
    leaf_names: BTreeMap<String, Var>,
    leaf_grads: HashMap<usize, Vec<f64>>,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || is_suffix(b, a) {
        Ok(a.to_vec())
    } else if is_suffix(a, b) {
        Ok(b.to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Elementwise `f(a, b)` where one operand may repeat to fill `out_len`.
fn zip_broadcast(a: &[f64], b: &[f64], out_len: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.len() == out_len && b.len() == out_len {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else if a.len() == out_len {
        let mut out = Vec::with_capacity(out_len);
        for chunk in a.chunks(b.len().max(1)) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        out
    } else {
        let mut out = Vec::with_capacity(out_len);
        for chunk in b.chunks(a.len().max(1)) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
        out
    }
}

/// Sums a broadcast gradient back down to `len` elements.
fn reduce_to(grad: Vec<f64>, len: usize) -> Vec<f64> {
    if grad.len() == len {
        return grad;
    }
    let mut out = vec![0.0; len];
    for chunk in grad.chunks(len.max(1)) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: strides describe in-bounds views of `a` (m x k), `b` (k x n) and a
    // dense row-major `c` (m x n); the slices outlive the call and `c` is exclusive.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn first_non_finite(data: &[f64]) -> Option<usize> {
    data.iter().position(|v| !v.is_finite())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Named leaf. Binding the same name twice returns the first node, so a
    /// parameter used in several places gets one summed gradient.
    pub fn bind(&mut self, name: &str, value: &Tensor, requires_grad: bool) -> Var {
        if let Some(&v) = self.names.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), requires_grad);
        self.names.insert(name.to_string(), v);
        if requires_grad {
            self.leaf_names.insert(name.to_string(), v);
        }
        v
    }

    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        self.bind(name, value, true)
    }

    pub fn var_named(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    /// Fresh constant holding a copy of `v`'s value; cuts the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if let Some(index) = first_non_finite(&value.data) {
            let slab = (value.len() / value.rows().max(1)).max(1);
            return Err(Error::NonFinite {
                op: name,
                index,
                row: index / slab,
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        make: fn(Var, Var) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let len = shape.iter().product();
        let data = zip_broadcast(ta.data(), tb.data(), len, f);
        self.push(make(a, b), Tensor { shape, data }, name)
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(op, value, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div, |x, y| x / y)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, ta.data(), (k, 1), tb.data(), (m, 1), &mut out);
        self.push(Op::MatMul(a, b), Tensor::new(vec![n, m], out)?, "matmul")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), "log", f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), "tanh", f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(a, Op::Powf(a, p), "powf", |x| x.powf(p))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), "scale", |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar(a), "add_scalar", |x| x + c)
    }

    /// Identity on the forward pass; multiplies the incoming gradient by `c`.
    pub fn scale_grad(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).clone();
        self.push(Op::ScaleGrad(a, c), value, "scale_grad")
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<()> {
        let shape = self.value(a).shape();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "sum")?;
        let value = sum_axis(self.value(a), axis, 1.0);
        self.push(Op::SumAxis(a, axis), value, "sum")
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "mean")?;
        let len = self.value(a).shape()[axis];
        if len == 0 {
            return Err(Error::invalid("mean over an empty axis"));
        }
        let value = sum_axis(self.value(a), axis, 1.0 / len as f64);
        self.push(Op::MeanAxis(a, axis), value, "mean")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s), "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Tiles `a` along leading axes up to `shape`; `a`'s shape must be a suffix of it.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if !is_suffix(ta.shape(), shape) {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: ta.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let len: usize = shape.iter().product();
        let reps = if ta.is_empty() { 0 } else { len / ta.len() };
        let mut data = Vec::with_capacity(len);
        for _ in 0..reps {
            data.extend_from_slice(ta.data());
        }
        self.push(Op::Broadcast(a), Tensor::new(shape.to_vec(), data)?, "broadcast")
    }

    /// Keeps the last-axis coordinates where `mask` is true.
    pub fn mask_select(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape().is_empty() || ta.cols() != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "mask_select",
                lhs: ta.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let keep: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let w = ta.cols();
        let mut data = Vec::with_capacity(ta.len() / w.max(1) * keep.len());
        for row in ta.data().chunks(w.max(1)) {
            data.extend(keep.iter().map(|&i| row[i]));
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().expect("non-scalar") = keep.len();
        self.push(Op::MaskSelect(a, keep), Tensor::new(shape, data)?, "mask_select")
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let lead = self.value(*first).shape();
        let lead = lead[..lead.len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: lead.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().expect("non-scalar"));
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Op::Concat(parts.to_vec()), Tensor::new(shape, data)?, "concat")
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let w = ta.cols().max(1);
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(w) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let shape = ta.shape().to_vec();
        self.push(Op::LogSoftmax(a), Tensor::new(shape, data)?, "log_softmax")
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients are added to whatever
    /// previous passes accumulated. Returns the gradient of every named leaf that
    /// requires grad (zeros where the loss does not reach it).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedGraph);
        }
        let nodes = &self.nodes;
        let leaf_grads = &mut self.leaf_grads;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        let send = |adj: &mut Vec<Option<Vec<f64>>>, v: Var, g: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let val = |v: &Var| &nodes[v.0].value;
            let needs = |v: &Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        leaf_grads.insert(id, g);
                    }
                },
                Op::Add(a, b) => {
                    if needs(b) {
                        send(&mut adj, *b, reduce_to(g.clone(), val(b).len()));
                    }
                    send(&mut adj, *a, reduce_to(g, val(a).len()));
                }
                Op::Sub(a, b) => {
                    if needs(b) {
                        let neg = g.iter().map(|v| -v).collect();
                        send(&mut adj, *b, reduce_to(neg, val(b).len()));
                    }
                    send(&mut adj, *a, reduce_to(g, val(a).len()));
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        let ga = zip_broadcast(&g, val(b).data(), g.len(), |x, y| x * y);
                        send(&mut adj, *a, reduce_to(ga, val(a).len()));
                    }
                    if needs(b) {
                        let gb = zip_broadcast(&g, val(a).data(), g.len(), |x, y| x * y);
                        send(&mut adj, *b, reduce_to(gb, val(b).len()));
                    }
                }
                Op::Div(a, b) => {
                    if needs(a) {
                        let ga = zip_broadcast(&g, val(b).data(), g.len(), |x, y| x / y);
                        send(&mut adj, *a, reduce_to(ga, val(a).len()));
                    }
                    if needs(b) {
                        // d(a/b)/db = -out / b
                        let t = zip_broadcast(&g, node.value.data(), g.len(), |x, y| -x * y);
                        let gb = zip_broadcast(&t, val(b).data(), g.len(), |x, y| x / y);
                        send(&mut adj, *b, reduce_to(gb, val(b).len()));
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(a), val(b));
                    let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if needs(a) {
                        // dA = dC . B^T
                        let mut ga = vec![0.0; n * k];
                        gemm(n, m, k, &g, (m, 1), tb.data(), (1, m), &mut ga);
                        send(&mut adj, *a, ga);
                    }
                    if needs(b) {
                        // dB = A^T . dC
                        let mut gb = vec![0.0; k * m];
                        gemm(k, n, m, ta.data(), (1, k), &g, (m, 1), &mut gb);
                        send(&mut adj, *b, gb);
                    }
                }
                Op::Exp(a) => {
                    let ga = g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                    send(&mut adj, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.iter().zip(val(a).data()).map(|(g, x)| g / x).collect();
                    send(&mut adj, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    send(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g
                        .iter()
                        .zip(val(a).data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    send(&mut adj, *a, ga);
                }
                Op::Powf(a, p) => {
                    let ga = g
                        .iter()
                        .zip(val(a).data())
                        .map(|(g, x)| g * p * x.powf(p - 1.0))
                        .collect();
                    send(&mut adj, *a, ga);
                }
                Op::Scale(a, c) | Op::ScaleGrad(a, c) => {
                    send(&mut adj, *a, g.iter().map(|v| v * c).collect());
                }
                Op::AddScalar(a) => send(&mut adj, *a, g),
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let (outer, len, inner) = axis_dims(val(a).shape(), *axis);
                    let c = if matches!(node.op, Op::MeanAxis(..)) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let mut ga = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            let src = &g[o * inner..(o + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * c);
                        }
                    }
                    send(&mut adj, *a, ga);
                }
                Op::SumAll(a) => send(&mut adj, *a, vec![g[0]; val(a).len()]),
                Op::Broadcast(a) => send(&mut adj, *a, reduce_to(g, val(a).len())),
                Op::MaskSelect(a, keep) => {
                    let w = val(a).cols();
                    let mut ga = vec![0.0; val(a).len()];
                    for (row, grow) in ga.chunks_mut(w).zip(g.chunks(keep.len().max(1))) {
                        for (&i, &gv) in keep.iter().zip(grow) {
                            row[i] = gv;
                        }
                    }
                    send(&mut adj, *a, ga);
                }
                Op::Concat(parts) => {
                    let widths: Vec<usize> = parts.iter().map(|p| val(p).cols()).collect();
                    let total: usize = widths.iter().sum();
                    let rows = node.value.len() / total.max(1);
                    let mut offset = 0;
                    for (p, &w) in parts.iter().zip(&widths) {
                        if needs(p) {
                            let mut gp = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            send(&mut adj, *p, gp);
                        }
                        offset += w;
                    }
                }
                Op::LogSoftmax(a) => {
                    let w = node.value.cols().max(1);
                    let mut ga = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks(w).zip(node.value.data().chunks(w)) {
                        let gs: f64 = grow.iter().sum();
                        ga.extend(grow.iter().zip(yrow).map(|(gv, y)| gv - y.exp() * gs));
                    }
                    send(&mut adj, *a, ga);
                }
            }
        }
        Ok(self.gradients())
    }

    /// Current accumulated gradients of all named trainable leaves.
    pub fn gradients(&self) -> Gradients {
        let by_name = self
            .leaf_names
            .iter()
            .map(|(name, v)| {
                let shape = self.value(*v).shape().to_vec();
                let data = self
                    .leaf_grads
                    .get(&v.0)
                    .cloned()
                    .unwrap_or_else(|| vec![0.0; self.value(*v).len()]);
                (name.clone(), Tensor { shape, data })
            })
            .collect();
        Gradients { by_name }
    }
}

fn sum_axis(t: &Tensor, axis: usize, c: f64) -> Tensor {
    let (outer, len, inner) = axis_dims(t.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let src = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }
    if c != 1.0 {
        out.iter_mut().for_each(|v| *v *= c);
    }
    let mut shape = t.shape().to_vec();
    shape.remove(axis);
    Tensor { shape, data: out }
}
