//! Tape-style reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Operations append nodes
//! in evaluation order, so reverse append order is a valid topological order
//! for [`Graph::backward`]. Only the ops needed for small MLPs and their
//! classification losses are provided.
//!
//! ```
//! use fca_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::vector(vec![1.0, 2.0]));
//! let sq = g.mul(w, w).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
//! ```

use crate::error::{Error, Result};

/// Dense row-major tensor. Rank 0 (scalar), 1 (vector) and 2 (matrix) are
/// the only ranks any op produces.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {:?}", s))),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    /// `rhs_row` marks a bias row broadcast over the rows of `lhs`.
    Add { lhs: Var, rhs: Var, rhs_row: bool },
    Sub { lhs: Var, rhs: Var, rhs_row: bool },
    Mul(Var, Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Powf(Var, f64),
    Sum(Var),
    Mean(Var),
    LogSoftmax(Var),
    StopGradient,
    Gather(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves that require grad.
    grad: Option<Vec<f64>>,
}

/// Append-only computation record for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.len()]);
        self.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        })
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a requires-grad leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, value: Tensor, op: Op, input: Var) -> Var {
        let requires_grad = self.nodes[input.0].requires_grad;
        self.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        })
    }

    fn binary(&mut self, value: Tensor, op: Op, a: Var, b: Var) -> Var {
        let requires_grad = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {}x{} * {}x{}", m, k, k2, n),
            ));
        }
        let out = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        Ok(self.binary(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let out = transpose_raw(&self.value(a).data, r, c);
        Ok(self.unary(Tensor { shape: vec![c, r], data: out }, Op::Transpose(a), a))
    }

    /// Shapes must match, except that `b` may be a bias row (`[n]` or `[1, n]`)
    /// broadcast over the rows of an `[m, n]` matrix `a`.
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            return Ok(false);
        }
        let row = match (sa, sb) {
            ([_, n], [nb]) => n == nb,
            ([_, n], [1, nb]) => n == nb,
            _ => false,
        };
        if row {
            Ok(true)
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, row: bool, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let tb = &self.value(b).data;
        let data = if row {
            let n = tb.len();
            ta.data
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb[i % n]))
                .collect()
        } else {
            ta.data.iter().zip(tb).map(|(&x, &y)| f(x, y)).collect()
        };
        Tensor {
            shape: ta.shape.clone(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let row = self.broadcast_check("add", a, b)?;
        let out = self.zip_broadcast(a, b, row, |x, y| x + y);
        Ok(self.binary(out, Op::Add { lhs: a, rhs: b, rhs_row: row }, a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let row = self.broadcast_check("sub", a, b)?;
        let out = self.zip_broadcast(a, b, row, |x, y| x - y);
        Ok(self.binary(out, Op::Sub { lhs: a, rhs: b, rhs_row: row }, a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out = self.zip_broadcast(a, b, false, |x, y| x * y);
        Ok(self.binary(out, Op::Mul(a, b), a, b))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.unary(out, Op::Relu(a), a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        self.unary(out, Op::Exp(a), a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "ln",
                detail: format!("non-positive input {}", bad),
            });
        }
        let out = self.map(a, f64::ln);
        Ok(self.unary(out, Op::Ln(a), a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| c * x);
        self.unary(out, Op::Scale(a, c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x + c);
        self.unary(out, Op::AddScalar(a), a)
    }

    /// Elementwise `x^c` for non-negative `x`.
    pub fn powf(&mut self, a: Var, c: f64) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain {
                op: "powf",
                detail: format!("negative base {}", bad),
            });
        }
        let out = self.map(a, |x| x.powf(c));
        Ok(self.unary(out, Op::Powf(a, c), a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(a), a)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.unary(Tensor::scalar(s), Op::Mean(a), a)
    }

    /// Row-wise log-softmax of a `[batch, C]` matrix, max-shifted.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("log_softmax")?;
        if cols < 2 {
            return Err(Error::shape("log_softmax", format!("need at least 2 columns, got {}", cols)));
        }
        let data = log_softmax_raw(&self.value(a).data, rows, cols);
        Ok(self.unary(Tensor { shape: vec![rows, cols], data }, Op::LogSoftmax(a), a))
    }

    /// Forwards the value unchanged; no gradient flows back through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(Node {
            value,
            op: Op::StopGradient,
            requires_grad: false,
            grad: None,
        })
    }

    /// Picks `a[i, index[i]]` for every row, giving a `[batch]` vector.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2("gather")?;
        if index.len() != rows {
            return Err(Error::shape("gather", format!("{} indices for {} rows", index.len(), rows)));
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= cols) {
            return Err(Error::shape("gather", format!("index {} out of range for {} columns", bad, cols)));
        }
        let src = &self.value(a).data;
        let data = index.iter().enumerate().map(|(i, &j)| src[i * cols + j]).collect();
        Ok(self.unary(Tensor::vector(data), Op::Gather(a, index.to_vec()), a))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(id);
            let node = &mut tail[0];
            let nodes = &*head;
            let wants = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    if let Some(acc) = node.grad.as_mut() {
                        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Op::StopGradient => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
                    let n = nodes[b.0].value.shape[1];
                    if wants(*a) {
                        let bt = transpose_raw(&nodes[b.0].value.data, k, n);
                        let ga = matmul_raw(&g, &bt, m, n, k);
                        accumulate(&mut grads, *a, &ga);
                    }
                    if wants(*b) {
                        let at = transpose_raw(&nodes[a.0].value.data, m, k);
                        let gb = matmul_raw(&at, &g, k, m, n);
                        accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
                    // g is c x r
                    accumulate(&mut grads, *a, &transpose_raw(&g, c, r));
                }
                Op::Add { lhs, rhs, rhs_row } | Op::Sub { lhs, rhs, rhs_row } => {
                    let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                    if wants(*lhs) {
                        accumulate(&mut grads, *lhs, &g);
                    }
                    if wants(*rhs) {
                        let gb: Vec<f64> = if *rhs_row {
                            let n = nodes[rhs.0].value.len();
                            let mut cols = vec![0.0; n];
                            for (i, x) in g.iter().enumerate() {
                                cols[i % n] += x;
                            }
                            cols.into_iter().map(|x| sign * x).collect()
                        } else {
                            g.iter().map(|x| sign * x).collect()
                        };
                        accumulate(&mut grads, *rhs, &gb);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        let ga = zip(&g, &nodes[b.0].value.data, |x, y| x * y);
                        accumulate(&mut grads, *a, &ga);
                    }
                    if wants(*b) {
                        let gb = zip(&g, &nodes[a.0].value.data, |x, y| x * y);
                        accumulate(&mut grads, *b, &gb);
                    }
                }
                Op::Relu(a) => {
                    let ga = zip(&g, &nodes[a.0].value.data, |x, v| if v > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga = zip(&g, &node.value.data, |x, y| x * y);
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Ln(a) => {
                    let ga = zip(&g, &nodes[a.0].value.data, |x, v| x / v);
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|x| c * x).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, &g),
                Op::Powf(a, c) => {
                    let c = *c;
                    let ga = zip(&g, &nodes[a.0].value.data, |x, v| {
                        if c == 0.0 {
                            0.0
                        } else {
                            x * c * v.powf(c - 1.0)
                        }
                    });
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Sum(a) => {
                    let n = nodes[a.0].value.len();
                    accumulate(&mut grads, *a, &vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].value.len();
                    accumulate(&mut grads, *a, &vec![g[0] / n as f64; n]);
                }
                Op::LogSoftmax(a) => {
                    let cols = node.value.shape[1];
                    let mut ga = vec![0.0; g.len()];
                    for ((grow, yrow), out) in g
                        .chunks(cols)
                        .zip(node.value.data.chunks(cols))
                        .zip(ga.chunks_mut(cols))
                    {
                        let total: f64 = grow.iter().sum();
                        for j in 0..cols {
                            out[j] = grow[j] - yrow[j].exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Gather(a, index) => {
                    let cols = nodes[a.0].value.shape[1];
                    let mut ga = vec![0.0; nodes[a.0].value.len()];
                    for (i, &j) in index.iter().enumerate() {
                        ga[i * cols + j] = g[i];
                    }
                    accumulate(&mut grads, *a, &ga);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match grads[v.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => grads[v.0] = Some(g.to_vec()),
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(crate) fn log_softmax_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for row in x.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

/// Row-wise softmax without recording anything.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let rows = x.len() / cols;
    log_softmax_raw(x, rows, cols).into_iter().map(f64::exp).collect()
}
