use std::cell::RefCell;
use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{contract, Error, Result};
use crate::real::Real;

/// Denominator floor for row normalization of (near-)zero rows.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds understood by [`Tape::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    SoftmaxRows,
    LogSoftmaxRows,
    Log,
    Exp,
    L2NormalizeRows,
    Transpose,
    SumAll,
    MeanAll,
    SumRows,
    MeanRows,
    FrobeniusSq,
    StopGradient,
    SliceRows { start: usize, end: usize },
    ConcatRows,
    /// Row-wise log-sum-exp over the entries whose mask bit is set.
    LogSumExpRows { mask: Option<Vec<bool>> },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::L2NormalizeRows => "l2_normalize_rows",
            OpKind::Transpose => "transpose",
            OpKind::SumAll => "sum",
            OpKind::MeanAll => "mean",
            OpKind::SumRows => "sum_rows",
            OpKind::MeanRows => "mean_rows",
            OpKind::FrobeniusSq => "frobenius_sq",
            OpKind::StopGradient => "stop_gradient",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::LogSumExpRows { .. } => "logsumexp_rows",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul => Some(2),
            OpKind::ConcatRows => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug)]
enum NodeKind {
    Leaf,
    Op(OpKind),
}

#[derive(Debug)]
struct Node<T: Real> {
    kind: NodeKind,
    parents: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
    /// Row norms cached by `L2NormalizeRows`.
    aux: Vec<T>,
    /// Accumulated gradient; only leaves carry one.
    grad: Option<Tensor<T>>,
}

/// Accumulated gradients of every leaf that requires one, keyed by handle.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T: Real = f64> {
    map: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.map.get(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor<T>)> {
        self.map.iter()
    }
}

/// Wengert-style tape. Nodes are appended in evaluation order so the tape is
/// acyclic by construction, and reverse index order is a valid topological
/// order for backpropagation.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f64> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node {
            kind: NodeKind::Leaf,
            parents: Vec::new(),
            value,
            requires_grad,
            aux: Vec::new(),
            grad: None,
        })
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> Result<T> {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn push(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Records `kind` applied to `inputs` and returns the result handle.
    pub fn apply(&self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = kind.arity() {
            if inputs.len() != n {
                return Err(contract(format!(
                    "{} takes {n} inputs, got {}",
                    kind.name(),
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(contract(format!("{} needs at least one input", kind.name())));
        }
        let (value, aux) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            forward(&kind, &vals)?
        };
        if !value.is_finite() {
            return Err(Error::NumericOverflow { op: kind.name() });
        }
        let requires_grad = !matches!(kind, OpKind::StopGradient)
            && {
                let nodes = self.nodes.borrow();
                inputs.iter().any(|v| nodes[v.0].requires_grad)
            };
        Ok(self.push(Node {
            kind: NodeKind::Op(kind),
            parents: inputs.iter().map(|v| v.0).collect(),
            value,
            requires_grad,
            aux,
            grad: None,
        }))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::SoftmaxRows, &[a])
    }

    pub fn log_softmax_rows(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::LogSoftmaxRows, &[a])
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::L2NormalizeRows, &[a])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::SumAll, &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::MeanAll, &[a])
    }

    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::SumRows, &[a])
    }

    pub fn mean_rows(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::MeanRows, &[a])
    }

    pub fn frobenius_sq(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::FrobeniusSq, &[a])
    }

    pub fn stop_gradient(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::StopGradient, &[a])
    }

    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::SliceRows { start, end }, &[a])
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatRows, parts)
    }

    pub fn logsumexp_rows(&self, a: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        self.apply(OpKind::LogSumExpRows { mask }, &[a])
    }

    /// Backpropagates from a scalar `root`, adding `d root / d leaf` into the
    /// accumulator of every leaf that requires a gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[root.0].value.numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        let mut pending: Vec<Option<Tensor<T>>> = Vec::new();
        pending.resize_with(root.0 + 1, || None);
        if nodes[root.0].requires_grad {
            pending[root.0] = Some(Tensor::ones(1, 1).reshaped_like(&nodes[root.0].value));
        }
        for id in (0..=root.0).rev() {
            let Some(upstream) = pending[id].take() else {
                continue;
            };
            if matches!(nodes[id].kind, NodeKind::Leaf) {
                let node = &mut nodes[id];
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.data_mut().iter_mut().zip(upstream.data()) {
                            *a = *a + *g;
                        }
                    }
                    None => node.grad = Some(upstream),
                }
                continue;
            }
            let node = &nodes[id];
            let NodeKind::Op(kind) = &node.kind else {
                continue;
            };
            let parents: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let grads = backward_op(kind, &parents, &node.value, &node.aux, &upstream)?;
            for (&p, g) in node.parents.iter().zip(grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                match pending[p].as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *v;
                        }
                    }
                    None => pending[p] = Some(g),
                }
            }
        }
        let mut map = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.kind, NodeKind::Leaf) && node.requires_grad {
                let g = node.grad.clone().unwrap_or_else(|| {
                    Tensor::full(node.value.rows(), node.value.cols(), T::zero())
                        .reshaped_like(&node.value)
                });
                map.insert(Var(id), g);
            }
        }
        Ok(Gradients { map })
    }
}

impl<T: Real> Tensor<T> {
    fn reshaped_like(mut self, like: &Tensor<T>) -> Self {
        self.shape = like.shape.clone();
        self
    }
}

fn shape_err(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn elementwise<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    } else if b.numel() == 1 {
        let y = b.data()[0];
        Ok(a.map(|x| f(x, y)))
    } else if a.numel() == 1 {
        let x = a.data()[0];
        Ok(b.map(|y| f(x, y)))
    } else {
        Err(shape_err(op, a, b))
    }
}

fn row_mask<'a>(mask: &'a Option<Vec<bool>>, x: &Tensor<impl Real>) -> Result<Option<&'a [bool]>> {
    match mask {
        Some(m) if m.len() != x.numel() => Err(Error::Shape {
            op: "logsumexp_rows",
            left: x.shape().to_vec(),
            right: vec![m.len()],
        }),
        Some(m) => Ok(Some(m.as_slice())),
        None => Ok(None),
    }
}

fn forward<T: Real>(kind: &OpKind, x: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<T>)> {
    let none = Vec::new;
    let out = match kind {
        OpKind::MatMul => x[0].matmul(x[1])?,
        OpKind::Add => elementwise("add", x[0], x[1], |a, b| a + b)?,
        OpKind::Sub => elementwise("sub", x[0], x[1], |a, b| a - b)?,
        OpKind::Mul => elementwise("mul", x[0], x[1], |a, b| a * b)?,
        OpKind::Scale(c) => {
            let c = T::lit(*c);
            x[0].map(|v| v * c)
        }
        OpKind::Relu => x[0].map(|v| if v > T::zero() { v } else { T::zero() }),
        OpKind::SoftmaxRows => {
            let (r, c) = x[0].dims()?;
            let mut out = x[0].clone();
            for i in 0..r {
                let row = &mut out.data_mut()[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s = s + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            }
            out
        }
        OpKind::LogSoftmaxRows => {
            let (r, c) = x[0].dims()?;
            let mut out = x[0].clone();
            for i in 0..r {
                let row = &mut out.data_mut()[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                for v in row.iter_mut() {
                    *v = *v - lse;
                }
            }
            out
        }
        OpKind::Log => x[0].map(T::ln),
        OpKind::Exp => x[0].map(T::exp),
        OpKind::L2NormalizeRows => {
            let (r, c) = x[0].dims()?;
            let mut out = x[0].clone();
            let mut norms = Vec::with_capacity(r);
            let eps = T::lit(NORMALIZE_EPS);
            for i in 0..r {
                let row = &mut out.data_mut()[i * c..(i + 1) * c];
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                let d = if n < eps { n + eps } else { n };
                for v in row.iter_mut() {
                    *v = *v / d;
                }
                norms.push(n);
            }
            return Ok((out, norms));
        }
        OpKind::Transpose => x[0].transpose()?,
        OpKind::SumAll => Tensor::scalar(x[0].data().iter().copied().sum()),
        OpKind::MeanAll => {
            let n = T::lit(x[0].numel() as f64);
            Tensor::scalar(x[0].data().iter().copied().sum::<T>() / n)
        }
        OpKind::SumRows | OpKind::MeanRows => {
            let (r, c) = x[0].dims()?;
            let div = if matches!(kind, OpKind::MeanRows) {
                T::lit(c as f64)
            } else {
                T::one()
            };
            let data = (0..r)
                .map(|i| x[0].row(i).iter().copied().sum::<T>() / div)
                .collect();
            Tensor::matrix(r, 1, data)?
        }
        OpKind::FrobeniusSq => Tensor::scalar(x[0].data().iter().map(|&v| v * v).sum()),
        OpKind::StopGradient => x[0].clone(),
        OpKind::SliceRows { start, end } => {
            let (r, c) = x[0].dims()?;
            if start >= end || *end > r {
                return Err(contract(format!("row slice {start}..{end} out of 0..{r}")));
            }
            Tensor::matrix(end - start, c, x[0].data()[start * c..end * c].to_vec())?
        }
        OpKind::ConcatRows => {
            let (_, c) = x[0].dims()?;
            let mut data = Vec::new();
            let mut rows = 0;
            for t in x {
                let (r, c2) = t.dims()?;
                if c2 != c {
                    return Err(shape_err("concat_rows", x[0], t));
                }
                rows += r;
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, c, data)?
        }
        OpKind::LogSumExpRows { mask } => {
            let (r, c) = x[0].dims()?;
            let mask = row_mask(mask, x[0])?;
            let keep = |i: usize, j: usize| mask.is_none_or(|m| m[i * c + j]);
            let mut data = Vec::with_capacity(r);
            for i in 0..r {
                let row = x[0].row(i);
                let m = (0..c)
                    .filter(|&j| keep(i, j))
                    .map(|j| row[j])
                    .fold(T::neg_infinity(), T::max);
                if m == T::neg_infinity() {
                    return Err(contract(format!("logsumexp row {i} has no unmasked entries")));
                }
                let s: T = (0..c).filter(|&j| keep(i, j)).map(|j| (row[j] - m).exp()).sum();
                data.push(m + s.ln());
            }
            Tensor::matrix(r, 1, data)?
        }
    };
    Ok((out, none()))
}

/// Reduces a same-shape gradient onto an operand that may have been
/// broadcast from a single element.
fn unbroadcast<T: Real>(g: Tensor<T>, operand: &Tensor<T>) -> Tensor<T> {
    if operand.shape() == g.shape() {
        g
    } else {
        Tensor::scalar(g.data().iter().copied().sum()).reshaped_like(operand)
    }
}

fn backward_op<T: Real>(
    kind: &OpKind,
    x: &[&Tensor<T>],
    y: &Tensor<T>,
    aux: &[T],
    g: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let grads = match kind {
        OpKind::MatMul => {
            let ga = g.matmul(&x[1].transpose()?)?;
            let gb = x[0].transpose()?.matmul(g)?;
            vec![ga, gb]
        }
        OpKind::Add => vec![unbroadcast(g.clone(), x[0]), unbroadcast(g.clone(), x[1])],
        OpKind::Sub => vec![
            unbroadcast(g.clone(), x[0]),
            unbroadcast(g.map(|v| -v), x[1]),
        ],
        OpKind::Mul => {
            let ga = elementwise("mul", g, x[1], |a, b| a * b)?;
            let gb = elementwise("mul", g, x[0], |a, b| a * b)?;
            vec![unbroadcast(ga, x[0]), unbroadcast(gb, x[1])]
        }
        OpKind::Scale(c) => {
            let c = T::lit(*c);
            vec![g.map(|v| v * c)]
        }
        OpKind::Relu => {
            let data = g
                .data()
                .iter()
                .zip(x[0].data())
                .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            vec![Tensor::new(g.shape().to_vec(), data)?]
        }
        OpKind::SoftmaxRows => {
            let (r, c) = y.dims()?;
            let mut out = g.clone();
            for i in 0..r {
                let yr = y.row(i);
                let gr = g.row(i);
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    out.data_mut()[i * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![out]
        }
        OpKind::LogSoftmaxRows => {
            let (r, c) = y.dims()?;
            let mut out = g.clone();
            for i in 0..r {
                let yr = y.row(i);
                let gsum: T = g.row(i).iter().copied().sum();
                for j in 0..c {
                    let k = i * c + j;
                    out.data_mut()[k] = g.data()[k] - yr[j].exp() * gsum;
                }
            }
            vec![out]
        }
        OpKind::Log => {
            let data = g.data().iter().zip(x[0].data()).map(|(&gv, &xv)| gv / xv).collect();
            vec![Tensor::new(g.shape().to_vec(), data)?]
        }
        OpKind::Exp => {
            let data = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect();
            vec![Tensor::new(g.shape().to_vec(), data)?]
        }
        OpKind::L2NormalizeRows => {
            // y = x / d with d = |x| (+eps for tiny rows):
            // dx = g / d - x (g . x) / (|x| d^2)
            let (r, c) = x[0].dims()?;
            let eps = T::lit(NORMALIZE_EPS);
            let mut out = g.clone();
            for i in 0..r {
                let n = aux[i];
                let d = if n < eps { n + eps } else { n };
                let xr = x[0].row(i);
                let gr = g.row(i);
                let dot: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                let coef = if n > T::zero() { dot / (n * d * d) } else { T::zero() };
                for j in 0..c {
                    out.data_mut()[i * c + j] = gr[j] / d - xr[j] * coef;
                }
            }
            vec![out]
        }
        OpKind::Transpose => vec![g.transpose()?],
        OpKind::SumAll => {
            let gv = g.data()[0];
            vec![x[0].map(|_| gv)]
        }
        OpKind::MeanAll => {
            let gv = g.data()[0] / T::lit(x[0].numel() as f64);
            vec![x[0].map(|_| gv)]
        }
        OpKind::SumRows | OpKind::MeanRows => {
            let (r, c) = x[0].dims()?;
            let div = if matches!(kind, OpKind::MeanRows) {
                T::lit(c as f64)
            } else {
                T::one()
            };
            let mut out = x[0].clone();
            for i in 0..r {
                let gi = g.data()[i] / div;
                for v in &mut out.data_mut()[i * c..(i + 1) * c] {
                    *v = gi;
                }
            }
            vec![out]
        }
        OpKind::FrobeniusSq => {
            let two_g = T::lit(2.0) * g.data()[0];
            vec![x[0].map(|v| two_g * v)]
        }
        OpKind::StopGradient => vec![x[0].map(|_| T::zero())],
        OpKind::SliceRows { start, .. } => {
            let c = x[0].cols();
            let mut out = x[0].map(|_| T::zero());
            out.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
            vec![out]
        }
        OpKind::ConcatRows => {
            let mut offset = 0;
            x.iter()
                .map(|t| {
                    let n = t.numel();
                    let part = Tensor::new(t.shape().to_vec(), g.data()[offset..offset + n].to_vec());
                    offset += n;
                    part
                })
                .collect::<Result<Vec<_>>>()?
        }
        OpKind::LogSumExpRows { mask } => {
            let (r, c) = x[0].dims()?;
            let mask = row_mask(mask, x[0])?;
            let mut out = x[0].map(|_| T::zero());
            for i in 0..r {
                let lse = y.data()[i];
                let gi = g.data()[i];
                let row = x[0].row(i);
                for j in 0..c {
                    if mask.is_none_or(|m| m[i * c + j]) {
                        out.data_mut()[i * c + j] = gi * (row[j] - lse).exp();
                    }
                }
            }
            vec![out]
        }
    };
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Straightforward triple loop used as the matmul oracle.
    fn naive_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; b[0].len()]; a.len()];
        for i in 0..a.len() {
            for j in 0..b[0].len() {
                for k in 0..b.len() {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_small_fixture() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let b = vec![vec![5.0, 6.0], vec![7.0, 8.0]];
        let expect = naive_matmul(&a, &b);
        assert_eq!(expect, vec![vec![19.0, 22.0], vec![43.0, 50.0]]);
        let t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_rows(&a).unwrap());
        let y = t.constant(Tensor::from_rows(&b).unwrap());
        let z = t.matmul(x, y).unwrap();
        assert_eq!(t.value(z), Tensor::from_rows(&expect).unwrap());
    }

    #[test]
    fn identity_matmul() {
        let a = m(&[&[1.5, -2.0, 0.25], &[3.0, 4.0, -1.0], &[0.0, 7.0, 2.0]]);
        let t = Tape::<f64>::new();
        let i = t.constant(Tensor::identity(3));
        let x = t.constant(a.clone());
        assert_eq!(t.value(t.matmul(i, x).unwrap()), a);
    }

    #[test]
    fn normalize_rows() {
        let t = Tape::<f64>::new();
        let x = t.constant(m(&[&[3.0, 4.0], &[1.0, 0.0]]));
        let y = t.value(t.l2_normalize_rows(x).unwrap());
        let oracle = |a: f64, b: f64| {
            let n = (a * a + b * b).sqrt();
            (a / n, b / n)
        };
        let (a, b) = oracle(3.0, 4.0);
        assert!((y.get(0, 0) - a).abs() < 1e-15 && (y.get(0, 1) - b).abs() < 1e-15);
        assert!((a - 0.6).abs() < 1e-15 && (b - 0.8).abs() < 1e-15);
        assert_eq!(y.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_zero_row_stays_finite() {
        let t = Tape::<f64>::new();
        let x = t.param(m(&[&[0.0, 0.0]]));
        let y = t.l2_normalize_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().is_finite());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let t = Tape::<f64>::new();
        let a = t.constant(Tensor::<f64>::zeros(2, 3));
        let b = t.constant(Tensor::<f64>::zeros(2, 3));
        match t.matmul(a, b) {
            Err(Error::Shape { op, left, right }) => {
                assert_eq!(op, "matmul");
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        let c = t.constant(Tensor::<f64>::zeros(3, 2));
        assert!(matches!(t.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn log_of_zero_is_overflow() {
        let t = Tape::<f64>::new();
        let a = t.constant(Tensor::<f64>::zeros(1, 2));
        assert!(matches!(t.log(a), Err(Error::NumericOverflow { op: "log" })));
        let big = t.constant(Tensor::scalar(1000.0));
        assert!(matches!(t.exp(big), Err(Error::NumericOverflow { op: "exp" })));
    }

    #[test]
    fn constant_graph_has_empty_gradients() {
        let t = Tape::<f64>::new();
        let c = t.constant(m(&[&[1.0, 2.0]]));
        let s = t.sum(c).unwrap();
        assert!(t.backward(s).unwrap().is_empty());
    }

    #[test]
    fn square_gradient() {
        let t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        let analytic = g.get(x).unwrap().item().unwrap();
        let h = 1e-5;
        let fd = ((3.0f64 + h).powi(2) - (3.0f64 - h).powi(2)) / (2.0 * h);
        assert!((analytic - 6.0).abs() < 1e-12);
        assert!((analytic - fd).abs() < 1e-8);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(2.0));
        let y = t.scale(x, 3.0).unwrap();
        t.backward(y).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
        t.zero_grad();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 3.0);
    }

    #[test]
    fn untouched_leaf_gets_zero() {
        let t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(2.0));
        let unused = t.param(Tensor::<f64>::ones(2, 2));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(2, 2));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let t = Tape::<f64>::new();
        let x = t.param(Tensor::<f64>::ones(2, 2));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn stop_gradient_severs_edge() {
        let t = Tape::<f64>::new();
        let x = t.param(m(&[&[1.0, -2.0]]));
        let s = t.stop_gradient(x).unwrap();
        assert_eq!(t.value(s), t.value(x));
        let y = t.frobenius_sq(s).unwrap();
        let z = t.add(y, x).unwrap();
        let total = t.sum(z).unwrap();
        let g = t.backward(total).unwrap();
        // only the direct `+ x` path contributes
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_of_large_logits() {
        let t = Tape::<f64>::new();
        let x = t.constant(m(&[&[1000.0, 0.0, -1000.0]]));
        let y = t.value(t.softmax_rows(x).unwrap());
        assert_eq!(y.data()[0], 1.0);
        let ls = t.value(t.log_softmax_rows(x).unwrap());
        assert!(ls.is_finite());
    }

    #[test]
    fn masked_logsumexp() {
        let t = Tape::<f64>::new();
        let x = t.constant(m(&[&[0.0, 1.0, 2.0]]));
        let y = t.logsumexp_rows(x, Some(vec![false, true, true])).unwrap();
        let expect = (1.0f64.exp() + 2.0f64.exp()).ln();
        assert!((t.scalar(y).unwrap() - expect).abs() < 1e-14);
        assert!(t
            .logsumexp_rows(x, Some(vec![false, false, false]))
            .is_err());
    }
}
