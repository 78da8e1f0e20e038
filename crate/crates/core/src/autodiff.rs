//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs already exist on the tape, so
//! the tape order is a topological order and `backward` is one reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{NliError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Neg,
}

impl ElementwiseKind {
    pub fn arity(self) -> usize {
        match self {
            ElementwiseKind::Add | ElementwiseKind::Sub | ElementwiseKind::Mul => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Binary(Var, Var, ElementwiseKind),
    Unary(Var, ElementwiseKind),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<Tensor>),
    AddConst(Var),
    SoftmaxRows(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reduce { input: Var, kind: ReduceKind, axis: usize, argmax: Vec<usize> },
    SumAll(Var),
    Transpose(Var),
    Gather { sources: Vec<Var>, index: Vec<(usize, usize)> },
    CrossEntropy { logits: Var, gold: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One graph per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    bound: HashMap<ParamId, Var>,
}

fn check_2d(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(NliError::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok(())
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NliError {
    NliError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&contribution),
        None => *slot = Some(contribution),
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
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

    fn val(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf after one or more `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant (non-differentiable) input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same node
    /// so every use of a weight accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push_arc(store.value_arc(id), Op::Leaf, true);
        self.bound.insert(id, v);
        v
    }

    /// Moves the parameter gradients produced by `backward` out of the graph.
    pub fn take_param_grads(&mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::with_capacity(self.bound.len());
        for (&id, &var) in &self.bound {
            let g = self
                .grads
                .get_mut(var.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros_like(&self.nodes[var.0].value));
            out.push((id, g));
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }

    // ---- forward operations ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// Matrix product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        check_2d("matmul", &av)?;
        check_2d("matmul", &bv)?;
        let (m, k) = if ta { (av.cols(), av.rows()) } else { (av.rows(), av.cols()) };
        let (k2, n) = if tb { (bv.cols(), bv.rows()) } else { (bv.rows(), bv.cols()) };
        if k != k2 {
            return Err(shape_err("matmul", &av, &bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), ta, bv.data(), tb, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(m, n, out), Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Pointwise operation; binary kinds require identical shapes.
    pub fn elementwise(&mut self, kind: ElementwiseKind, args: &[Var]) -> Result<Var> {
        if args.len() != kind.arity() {
            return Err(NliError::contract(format!(
                "{kind:?} takes {} argument(s), got {}",
                kind.arity(),
                args.len()
            )));
        }
        if kind.arity() == 2 {
            let (a, b) = (args[0], args[1]);
            let (av, bv) = (self.val(a), self.val(b));
            if av.shape() != bv.shape() {
                return Err(shape_err("elementwise", &av, &bv));
            }
            let f: fn(f64, f64) -> f64 = match kind {
                ElementwiseKind::Add => |x, y| x + y,
                ElementwiseKind::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            let out = Tensor::new(av.shape().to_vec(), data)?;
            let rg = self.rg(a) || self.rg(b);
            return Ok(self.push(out, Op::Binary(a, b, kind), rg));
        }
        let x = args[0];
        let f: fn(f64) -> f64 = match kind {
            ElementwiseKind::Sigmoid => sigmoid,
            ElementwiseKind::Tanh => f64::tanh,
            ElementwiseKind::Relu => |v| if v > 0.0 { v } else { 0.0 },
            ElementwiseKind::Exp => f64::exp,
            _ => |v| -v,
        };
        let out = self.val(x).map(f);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Unary(x, kind), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Mul, &[a, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.elementwise(ElementwiseKind::Sigmoid, &[x]).expect("unary")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.elementwise(ElementwiseKind::Tanh, &[x]).expect("unary")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.elementwise(ElementwiseKind::Relu, &[x]).expect("unary")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.elementwise(ElementwiseKind::Exp, &[x]).expect("unary")
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.elementwise(ElementwiseKind::Neg, &[x]).expect("unary")
    }

    /// `x + bias` where `bias` is `[1, n]` and is added to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.val(x), self.val(bias));
        check_2d("add_bias", &xv)?;
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(shape_err("add_bias", &xv, &bv));
        }
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::from_vec(xv.rows(), n, data), Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.val(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Pointwise product with a constant tensor (masks, dropout).
    pub fn mul_const(&mut self, x: Var, c: Arc<Tensor>) -> Result<Var> {
        let xv = self.val(x);
        if xv.shape() != c.shape() {
            return Err(shape_err("mul_const", &xv, &c));
        }
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, c), rg))
    }

    /// Pointwise sum with a constant tensor (additive masks).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xv = self.val(x);
        if xv.shape() != c.shape() {
            return Err(shape_err("add_const", &xv, c));
        }
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        check_2d("softmax_rows", &xv)?;
        let out = softmax_rows_value(&xv);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        check_2d("transpose", &xv)?;
        let out = xv.transpose();
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// Concatenation along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(NliError::contract("concat of zero tensors"));
        }
        if axis > 1 {
            return Err(NliError::Axis { axis, rank: 2 });
        }
        let vals: Vec<Arc<Tensor>> = inputs.iter().map(|&v| self.val(v)).collect();
        for v in &vals {
            check_2d("concat", v)?;
        }
        let first = &vals[0];
        let out = if axis == 0 {
            let cols = first.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for v in &vals {
                if v.cols() != cols {
                    return Err(shape_err("concat", first, v));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::from_vec(rows, cols, data)
        } else {
            let rows = first.rows();
            let mut cols = 0;
            for v in &vals {
                if v.rows() != rows {
                    return Err(shape_err("concat", first, v));
                }
                cols += v.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row_slice(r));
                }
            }
            Tensor::from_vec(rows, cols, data)
        };
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.val(x);
        check_2d("slice", &xv)?;
        if axis > 1 {
            return Err(NliError::Axis { axis, rank: 2 });
        }
        let extent = xv.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(NliError::contract(format!(
                "slice [{start}, {}) out of range for extent {extent}",
                start + len
            )));
        }
        let out = if axis == 0 {
            let c = xv.cols();
            Tensor::from_vec(len, c, xv.data()[start * c..(start + len) * c].to_vec())
        } else {
            let mut data = Vec::with_capacity(xv.rows() * len);
            for r in 0..xv.rows() {
                data.extend_from_slice(&xv.row_slice(r)[start..start + len]);
            }
            Tensor::from_vec(xv.rows(), len, data)
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice { input: x, axis, start }, rg))
    }

    /// Reduction over `axis`; axis 0 yields `[1, n]`, axis 1 yields `[m, 1]`.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axis: usize) -> Result<Var> {
        let xv = self.val(x);
        check_2d("reduce", &xv)?;
        if axis > 1 {
            return Err(NliError::Axis { axis, rank: 2 });
        }
        let (m, n) = (xv.rows(), xv.cols());
        let (outer, inner) = if axis == 0 { (n, m) } else { (m, n) };
        let at = |o: usize, i: usize| if axis == 0 { xv.data()[i * n + o] } else { xv.data()[o * n + i] };
        let mut out = Vec::with_capacity(outer);
        let mut argmax = Vec::new();
        for o in 0..outer {
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let s: f64 = (0..inner).map(|i| at(o, i)).sum();
                    out.push(if kind == ReduceKind::Mean { s / inner as f64 } else { s });
                }
                ReduceKind::Max => {
                    let mut best = 0;
                    for i in 1..inner {
                        // strict comparison keeps the lowest index on ties
                        if at(o, i) > at(o, best) {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    out.push(at(o, best));
                }
            }
        }
        let t = if axis == 0 {
            Tensor::from_vec(1, n, out)
        } else {
            Tensor::from_vec(m, 1, out)
        };
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Reduce {
                input: x,
                kind,
                axis,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.val(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Builds a matrix whose row `r` is row `index[r].1` of `sources[index[r].0]`.
    pub fn gather(&mut self, sources: &[Var], index: &[(usize, usize)]) -> Result<Var> {
        if index.is_empty() {
            return Err(NliError::contract("gather with empty index"));
        }
        let vals: Vec<Arc<Tensor>> = sources.iter().map(|&v| self.val(v)).collect();
        let cols = vals
            .first()
            .ok_or_else(|| NliError::contract("gather without sources"))?
            .cols();
        for v in &vals {
            check_2d("gather", v)?;
            if v.cols() != cols {
                return Err(shape_err("gather", &vals[0], v));
            }
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &(s, r) in index {
            let src = vals
                .get(s)
                .ok_or_else(|| NliError::contract(format!("gather source {s} out of range")))?;
            if r >= src.rows() {
                return Err(NliError::contract(format!(
                    "gather row {r} out of range for {:?}",
                    src.shape()
                )));
            }
            data.extend_from_slice(src.row_slice(r));
        }
        let rg = sources.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_vec(index.len(), cols, data),
            Op::Gather {
                sources: sources.to_vec(),
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Rows of one source matrix, e.g. embedding lookup.
    pub fn gather_rows(&mut self, source: Var, rows: &[usize]) -> Result<Var> {
        let index: Vec<(usize, usize)> = rows.iter().map(|&r| (0, r)).collect();
        self.gather(&[source], &index)
    }

    /// Mean negative log-likelihood of `gold` under `softmax(logits)`, fused.
    pub fn cross_entropy(&mut self, logits: Var, gold: &[usize]) -> Result<Var> {
        let lv = self.val(logits);
        check_2d("cross_entropy", &lv)?;
        if lv.rows() != gold.len() {
            return Err(NliError::contract(format!(
                "{} gold labels for {} rows of logits",
                gold.len(),
                lv.rows()
            )));
        }
        if let Some(&bad) = gold.iter().find(|&&g| g >= lv.cols()) {
            return Err(NliError::contract(format!(
                "class index {bad} out of range for {} classes",
                lv.cols()
            )));
        }
        let probs = softmax_rows_value(&lv);
        let mut total = 0.0;
        for (r, &g) in gold.iter().enumerate() {
            let row = lv.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[g];
        }
        let loss = total / gold.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                gold: gold.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NliError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut local: Vec<Option<Tensor>> = Vec::new();
        local.resize_with(loss.0 + 1, || None);
        local[loss.0] = Some(Tensor::new(self.nodes[loss.0].value.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = local[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                if self.grads.len() < self.nodes.len() {
                    self.grads.resize_with(self.nodes.len(), || None);
                }
                accumulate(&mut self.grads[idx], upstream);
                continue;
            }
            self.propagate(idx, &upstream, &mut local);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, up: &Tensor, local: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let value = |v: Var| &*self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (value(*a), value(*b));
                let (m, n) = (out.rows(), out.cols());
                let k = if *ta { av.rows() } else { av.cols() };
                if rg(*a) {
                    // dA = dC · Bᵀ  (or its transpose when A was transposed)
                    let mut g = vec![0.0; av.len()];
                    if *ta {
                        gemm(k, n, m, bv.data(), *tb, up.data(), true, &mut g, 0.0);
                    } else {
                        gemm(m, n, k, up.data(), false, bv.data(), !*tb, &mut g, 0.0);
                    }
                    accumulate(&mut local[a.0], Tensor::from_vec(av.rows(), av.cols(), g));
                }
                if rg(*b) {
                    // dB = Aᵀ · dC  (or its transpose when B was transposed)
                    let mut g = vec![0.0; bv.len()];
                    if *tb {
                        gemm(n, m, k, up.data(), true, av.data(), *ta, &mut g, 0.0);
                    } else {
                        gemm(k, m, n, av.data(), !*ta, up.data(), false, &mut g, 0.0);
                    }
                    accumulate(&mut local[b.0], Tensor::from_vec(bv.rows(), bv.cols(), g));
                }
            }
            Op::Binary(a, b, kind) => {
                let (av, bv) = (value(*a), value(*b));
                if rg(*a) {
                    let g = match kind {
                        ElementwiseKind::Mul => zip_map(up, bv, |u, y| u * y),
                        _ => up.clone(),
                    };
                    accumulate(&mut local[a.0], g);
                }
                if rg(*b) {
                    let g = match kind {
                        ElementwiseKind::Mul => zip_map(up, av, |u, x| u * x),
                        ElementwiseKind::Sub => up.map(|u| -u),
                        _ => up.clone(),
                    };
                    accumulate(&mut local[b.0], g);
                }
            }
            Op::Unary(x, kind) => {
                if rg(*x) {
                    let g = match kind {
                        ElementwiseKind::Sigmoid => zip_map(up, out, |u, y| u * y * (1.0 - y)),
                        ElementwiseKind::Tanh => zip_map(up, out, |u, y| u * (1.0 - y * y)),
                        ElementwiseKind::Relu => zip_map(up, out, |u, y| if y > 0.0 { u } else { 0.0 }),
                        ElementwiseKind::Exp => zip_map(up, out, |u, y| u * y),
                        _ => up.map(|u| -u),
                    };
                    accumulate(&mut local[x.0], g);
                }
            }
            Op::AddBias(x, bias) => {
                if rg(*x) {
                    accumulate(&mut local[x.0], up.clone());
                }
                if rg(*bias) {
                    let n = up.cols();
                    let mut g = vec![0.0; n];
                    for row in up.data().chunks(n) {
                        for (acc, v) in g.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut local[bias.0], Tensor::from_vec(1, n, g));
                }
            }
            Op::Scale(x, f) => {
                if rg(*x) {
                    accumulate(&mut local[x.0], up.map(|u| u * f));
                }
            }
            Op::MulConst(x, c) => {
                if rg(*x) {
                    accumulate(&mut local[x.0], zip_map(up, c, |u, m| u * m));
                }
            }
            Op::AddConst(x) => {
                if rg(*x) {
                    accumulate(&mut local[x.0], up.clone());
                }
            }
            Op::SoftmaxRows(x) => {
                if rg(*x) {
                    let n = out.cols();
                    let mut g = vec![0.0; out.len()];
                    for r in 0..out.rows() {
                        let y = out.row_slice(r);
                        let u = up.row_slice(r);
                        let dot: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] = y[j] * (u[j] - dot);
                        }
                    }
                    accumulate(&mut local[x.0], Tensor::from_vec(out.rows(), n, g));
                }
            }
            Op::Transpose(x) => {
                if rg(*x) {
                    accumulate(&mut local[x.0], up.transpose());
                }
            }
            Op::Concat { inputs, axis } => {
                let mut offset = 0;
                for &inp in inputs {
                    let iv = value(inp);
                    if rg(inp) {
                        let g = if *axis == 0 {
                            let c = iv.cols();
                            Tensor::from_vec(iv.rows(), c, up.data()[offset * c..(offset + iv.rows()) * c].to_vec())
                        } else {
                            let w = iv.cols();
                            let mut d = Vec::with_capacity(iv.len());
                            for r in 0..up.rows() {
                                d.extend_from_slice(&up.row_slice(r)[offset..offset + w]);
                            }
                            Tensor::from_vec(iv.rows(), w, d)
                        };
                        accumulate(&mut local[inp.0], g);
                    }
                    offset += if *axis == 0 { iv.rows() } else { iv.cols() };
                }
            }
            Op::Slice { input, axis, start } => {
                if rg(*input) {
                    let iv = value(*input);
                    let slot = local[input.0].get_or_insert_with(|| Tensor::zeros_like(iv));
                    let c = iv.cols();
                    if *axis == 0 {
                        let dst = &mut slot.data_mut()[start * c..start * c + up.len()];
                        for (d, u) in dst.iter_mut().zip(up.data()) {
                            *d += u;
                        }
                    } else {
                        let w = up.cols();
                        for r in 0..up.rows() {
                            let dst = &mut slot.row_slice_mut(r)[*start..start + w];
                            for (d, u) in dst.iter_mut().zip(up.row_slice(r)) {
                                *d += u;
                            }
                        }
                    }
                }
            }
            Op::Reduce {
                input,
                kind,
                axis,
                argmax,
            } => {
                if rg(*input) {
                    let iv = value(*input);
                    let (m, n) = (iv.rows(), iv.cols());
                    let mut g = vec![0.0; m * n];
                    let pos = |o: usize, i: usize| if *axis == 0 { i * n + o } else { o * n + i };
                    let inner = if *axis == 0 { m } else { n };
                    for (o, &u) in up.data().iter().enumerate() {
                        match kind {
                            ReduceKind::Sum => (0..inner).for_each(|i| g[pos(o, i)] += u),
                            ReduceKind::Mean => (0..inner).for_each(|i| g[pos(o, i)] += u / inner as f64),
                            ReduceKind::Max => g[pos(o, argmax[o])] += u,
                        }
                    }
                    accumulate(&mut local[input.0], Tensor::from_vec(m, n, g));
                }
            }
            Op::SumAll(x) => {
                if rg(*x) {
                    let u = up.item();
                    accumulate(&mut local[x.0], value(*x).map(|_| u));
                }
            }
            Op::Gather { sources, index } => {
                let cols = up.cols();
                for (r, &(s, row)) in index.iter().enumerate() {
                    let src = sources[s];
                    if !rg(src) {
                        continue;
                    }
                    let slot = local[src.0].get_or_insert_with(|| Tensor::zeros_like(value(src)));
                    let dst = &mut slot.data_mut()[row * cols..(row + 1) * cols];
                    for (d, u) in dst.iter_mut().zip(up.row_slice(r)) {
                        *d += u;
                    }
                }
            }
            Op::CrossEntropy { logits, gold, probs } => {
                if rg(*logits) {
                    let scale = up.item() / gold.len() as f64;
                    let mut g = probs.clone();
                    for (r, &y) in gold.iter().enumerate() {
                        let row = g.row_slice_mut(r);
                        row[y] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    accumulate(&mut local[logits.0], g);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub fn softmax_rows_value(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::from_vec(x.rows(), n, data)
}
