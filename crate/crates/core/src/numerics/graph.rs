//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in creation order, so reverse creation order is always a valid topological
//! order for [`Graph::backward`]. Graphs are cheap to build and are meant to be
//! discarded after each forward/backward pass.
//!
//! Gradient contributions reaching a node are summed in ascending order of the
//! contributing child, which makes the result independent of the traversal
//! order chosen.

use std::collections::BTreeMap;

use super::array::{
    axis_split, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel, reduced_shape, Array,
};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Ln(Var),
    Abs(Var),
    Softmax(Var, usize),
    Mean(Var, usize),
    Std(Var, usize),
    Max(Var, Vec<usize>),
    SumAll(Var),
    L2Norm(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    GroupMeanRows(Var, Vec<Vec<usize>>),
    GatherRows(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>),
    Entropy(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _)
            | Relu(a)
            | Ln(a)
            | Abs(a)
            | Softmax(a, _)
            | Mean(a, _)
            | Std(a, _)
            | Max(a, _)
            | SumAll(a)
            | L2Norm(a)
            | Reshape(a)
            | GroupMeanRows(a, _)
            | GatherRows(a, _)
            | CrossEntropy(a, _)
            | Entropy(a) => vec![*a],
            Concat(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
    params: BTreeMap<String, Var>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` influenced the root.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter bound into the graph. Parameters that did
    /// not reach the root get an all-zero gradient.
    pub fn params(&self) -> BTreeMap<String, Array> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = self
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(&self.shapes[v.0]));
                (name.clone(), g)
            })
            .collect()
    }
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Array) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Binds a named parameter from `store` as a differentiable leaf. Binding
    /// the same name twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let v = self.variable(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn push_raw(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Array, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected 2-D operand, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul")?;
        let (k2, m) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("({n},{k}) x ({k2},{m})")));
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push("matmul", Array::new(vec![n, m], out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2(a, "matmul_nt")?;
        let (m, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("({n},{k}) x ({m},{k2})^T")));
        }
        let out = matmul_nt_kernel(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push("matmul_nt", Array::new(vec![n, m], out)?, Op::MatMulNt(a, b))
    }

    /// Vector-matrix product for a 1-D `x` of length `k` and `(k, m)` weights.
    pub fn vecmat(&mut self, x: Var, w: Var) -> Result<Var> {
        let k = self.value(x).len();
        let row = self.reshape(x, &[1, k])?;
        let out = self.matmul(row, w)?;
        let m = self.value(out).len();
        self.reshape(out, &[m])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b))
    }

    /// Adds a 1-D bias to every row of `x` (or to a 1-D `x` directly).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let bs = self.shape(b).to_vec();
        let xs = self.shape(x).to_vec();
        let cols = *xs.last().unwrap_or(&0);
        if bs.len() != 1 || bs[0] != cols || xs.len() > 2 {
            return Err(Error::shape("add_bias", format!("{xs:?} + {bs:?}")));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(cols) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        self.push("add_bias", v, Op::AddBias(x, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", v, Op::Relu(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push("ln", v, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.push("abs", v, Op::Abs(a))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = softmax_values(self.value(a), axis)?;
        self.push("softmax", v, Op::Softmax(a, axis))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, r, inner) = axis_split(x.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0;
                for j in 0..r {
                    s += x.data()[(o * r + j) * inner + i];
                }
                out[o * inner + i] = s / r as f64;
            }
        }
        let v = Array::new(reduced_shape(x.shape(), axis), out)?;
        self.push("mean", v, Op::Mean(a, axis))
    }

    /// Population standard deviation (divide by n) along `axis`; zero for a
    /// single element.
    pub fn std(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, r, inner) = axis_split(x.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * r + j) * inner + i;
                let mut mu = 0.0;
                for j in 0..r {
                    mu += x.data()[idx(j)];
                }
                mu /= r as f64;
                let mut var = 0.0;
                for j in 0..r {
                    let d = x.data()[idx(j)] - mu;
                    var += d * d;
                }
                out[o * inner + i] = (var / r as f64).sqrt();
            }
        }
        let v = Array::new(reduced_shape(x.shape(), axis), out)?;
        self.push("std", v, Op::Std(a, axis))
    }

    /// Maximum along `axis`. The gradient flows to the lowest-index maximum.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, r, inner) = axis_split(x.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * r) * inner + i;
                for j in 1..r {
                    let k = (o * r + j) * inner + i;
                    if x.data()[k] > x.data()[best] {
                        best = k;
                    }
                }
                out[o * inner + i] = x.data()[best];
                arg[o * inner + i] = best;
            }
        }
        let v = Array::new(reduced_shape(x.shape(), axis), out)?;
        self.push("max", v, Op::Max(a, arg))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let v = Array::scalar(self.value(a).sum());
        self.push("sum_all", v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let v = Array::scalar(self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt());
        self.push("l2_norm", v, Op::L2Norm(a))
    }

    /// Sum of squares, `‖a‖²`.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum_all(sq)
    }

    /// Concatenates along axis 0: 1-D parts are joined end to end, 2-D parts
    /// are stacked by rows.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no parts"))?;
        let tail: Vec<usize> = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{:?} vs trailing {tail:?}", s)));
            }
            lead += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let v = Array::new(shape, data)?;
        self.push("concat", v, Op::Concat(parts.to_vec()))
    }

    /// Stacks equal-length 1-D vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let width = rows.first().map(|r| self.value(*r).len()).unwrap_or(0);
        if rows.iter().any(|r| self.shape(*r) != [width]) {
            return Err(Error::shape("stack_rows", "rows must be equal-length vectors"));
        }
        let flat = self.concat(rows)?;
        self.reshape(flat, &[rows.len(), width])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshaped(shape)?;
        self.push("reshape", v, Op::Reshape(a))
    }

    /// Row-wise mean over each group of row indices, giving `(groups, cols)`.
    pub fn group_mean_rows(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "group_mean_rows")?;
        if groups.is_empty() || groups.iter().any(|g| g.is_empty() || g.iter().any(|&r| r >= rows)) {
            return Err(Error::shape("group_mean_rows", "empty group or row index out of range"));
        }
        let x = self.value(a);
        let mut out = vec![0.0; groups.len() * cols];
        for (gi, g) in groups.iter().enumerate() {
            let orow = &mut out[gi * cols..(gi + 1) * cols];
            for &r in g {
                for (o, v) in orow.iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            let inv = 1.0 / g.len() as f64;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let v = Array::new(vec![groups.len(), cols], out)?;
        self.push("group_mean_rows", v, Op::GroupMeanRows(a, groups))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&r| r >= rows) {
            return Err(Error::shape("gather_rows", "empty selection or row out of range"));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &r in &idx {
            out.extend_from_slice(x.row(r));
        }
        let v = Array::new(vec![idx.len(), cols], out)?;
        self.push("gather_rows", v, Op::GatherRows(a, idx))
    }

    /// Mean softmax cross-entropy of each row of `logits` against its target
    /// class.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let (rows, cols) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows || targets.iter().any(|&t| t >= cols) {
            return Err(Error::shape("cross_entropy", "target count or class out of range"));
        }
        let x = self.value(logits);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = Array::scalar(total / rows as f64);
        self.push("cross_entropy", v, Op::CrossEntropy(logits, targets))
    }

    /// Shannon entropy `-Σ w ln w` of a 1-D distribution, with `0 ln 0 = 0`.
    pub fn entropy(&mut self, w: Var) -> Result<Var> {
        let x = self.value(w);
        if x.ndim() != 1 {
            return Err(Error::shape("entropy", format!("expected 1-D, got {:?}", x.shape())));
        }
        if x.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("entropy: component outside [0, 1]"));
        }
        let h = x.data().iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum();
        self.push("entropy", Array::scalar(h), Op::Entropy(w))
    }

    /// Reverse pass from a scalar `root` in reverse creation order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let order: Vec<usize> = (0..=root.0).rev().collect();
        self.backward_in_order(root, &order)
    }

    /// Reverse pass with an explicit processing order. Every node in
    /// `0..=root` must appear exactly once, each before all of its parents.
    pub(crate) fn backward_in_order(&self, root: Var, order: &[usize]) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        self.check_order(root, order)?;

        let n = root.0 + 1;
        let mut pending: Vec<Vec<(usize, Array)>> = (0..n).map(|_| Vec::new()).collect();
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[root.0].push((usize::MAX, Array::full(rv.shape(), 1.0)));

        for &idx in order {
            let node = &self.nodes[idx];
            if !node.requires_grad || pending[idx].is_empty() {
                continue;
            }
            let mut contribs = std::mem::take(&mut pending[idx]);
            contribs.sort_by_key(|(child, _)| *child);
            let mut iter = contribs.into_iter();
            let mut g = iter.next().map(|(_, a)| a).expect("non-empty");
            for (_, c) in iter {
                g.add_assign(&c);
            }
            for (parent, contrib) in self.local_grads(idx, &g)? {
                if self.nodes[parent.0].requires_grad {
                    pending[parent.0].push((idx, contrib));
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn check_order(&self, root: Var, order: &[usize]) -> Result<()> {
        let n = root.0 + 1;
        let mut pos = vec![usize::MAX; n];
        for (i, &idx) in order.iter().enumerate() {
            if idx >= n || pos[idx] != usize::MAX {
                return Err(Error::invalid("backward order is not a permutation of the graph"));
            }
            pos[idx] = i;
        }
        if order.len() != n {
            return Err(Error::invalid("backward order misses nodes"));
        }
        for idx in 0..n {
            for p in self.nodes[idx].op.parents() {
                if pos[p.0] < pos[idx] {
                    return Err(Error::invalid("backward order is not topological"));
                }
            }
        }
        Ok(())
    }

    /// Contributions of node `idx` (with upstream gradient `g`) to its parents.
    fn local_grads(&self, idx: usize, g: &Array) -> Result<Vec<(Var, Array)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[idx].value;
        Ok(match &self.nodes[idx].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (n, k) = (val(*a).rows(), val(*a).cols());
                let m = val(*b).cols();
                let ga = matmul_nt_kernel(g.data(), val(*b).data(), n, m, k);
                let gb = matmul_tn_kernel(val(*a).data(), g.data(), n, k, m);
                vec![
                    (*a, Array::new(vec![n, k], ga)?),
                    (*b, Array::new(vec![k, m], gb)?),
                ]
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = (val(*a).rows(), val(*a).cols());
                let m = val(*b).rows();
                let ga = matmul_kernel(g.data(), val(*b).data(), n, m, k);
                let gb = matmul_tn_kernel(g.data(), val(*a).data(), n, m, k);
                vec![
                    (*a, Array::new(vec![n, k], ga)?),
                    (*b, Array::new(vec![m, k], gb)?),
                ]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)),
                (*b, g.zip_map(val(*a), |x, y| x * y)),
            ],
            Op::AddBias(x, b) => {
                let cols = val(*b).len();
                let mut gb = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                vec![(*x, g.clone()), (*b, Array::new(vec![cols], gb)?)]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }))],
            Op::Ln(a) => vec![(*a, g.zip_map(val(*a), |gv, x| gv / x))],
            Op::Abs(a) => vec![(
                *a,
                g.zip_map(val(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                }),
            )],
            Op::Softmax(a, axis) => {
                let (outer, r, inner) = axis_split(out.shape(), *axis)?;
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * r + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..r {
                            dot += g.data()[idx(j)] * y[idx(j)];
                        }
                        for j in 0..r {
                            gx[idx(j)] = y[idx(j)] * (g.data()[idx(j)] - dot);
                        }
                    }
                }
                vec![(*a, Array::new(out.shape().to_vec(), gx)?)]
            }
            Op::Mean(a, axis) => {
                let x = val(*a);
                let (outer, r, inner) = axis_split(x.shape(), *axis)?;
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g.data()[o * inner + i] / r as f64;
                        for j in 0..r {
                            gx[(o * r + j) * inner + i] = gv;
                        }
                    }
                }
                vec![(*a, Array::new(x.shape().to_vec(), gx)?)]
            }
            Op::Std(a, axis) => {
                let x = val(*a);
                let (outer, r, inner) = axis_split(x.shape(), *axis)?;
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let sigma = out.data()[o * inner + i];
                        if sigma == 0.0 {
                            continue;
                        }
                        let idx = |j: usize| (o * r + j) * inner + i;
                        let mut mu = 0.0;
                        for j in 0..r {
                            mu += x.data()[idx(j)];
                        }
                        mu /= r as f64;
                        let coef = g.data()[o * inner + i] / (r as f64 * sigma);
                        for j in 0..r {
                            gx[idx(j)] = coef * (x.data()[idx(j)] - mu);
                        }
                    }
                }
                vec![(*a, Array::new(x.shape().to_vec(), gx)?)]
            }
            Op::Max(a, arg) => {
                let x = val(*a);
                let mut gx = vec![0.0; x.len()];
                for (k, &src) in arg.iter().enumerate() {
                    gx[src] += g.data()[k];
                }
                vec![(*a, Array::new(x.shape().to_vec(), gx)?)]
            }
            Op::SumAll(a) => vec![(*a, Array::full(val(*a).shape(), g.item()))],
            Op::L2Norm(a) => {
                let norm = out.item();
                let scale = if norm > 0.0 { g.item() / norm } else { 0.0 };
                vec![(*a, val(*a).map(|x| x * scale))]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let pv = val(*p);
                    let chunk = g.data()[offset..offset + pv.len()].to_vec();
                    offset += pv.len();
                    res.push((*p, Array::new(pv.shape().to_vec(), chunk)?));
                }
                res
            }
            Op::Reshape(a) => vec![(*a, g.reshaped(val(*a).shape())?)],
            Op::GroupMeanRows(a, groups) => {
                let x = val(*a);
                let cols = x.cols();
                let mut gx = vec![0.0; x.len()];
                for (gi, grp) in groups.iter().enumerate() {
                    let inv = 1.0 / grp.len() as f64;
                    let grow = &g.data()[gi * cols..(gi + 1) * cols];
                    for &r in grp {
                        for (o, v) in gx[r * cols..(r + 1) * cols].iter_mut().zip(grow) {
                            *o += v * inv;
                        }
                    }
                }
                vec![(*a, Array::new(x.shape().to_vec(), gx)?)]
            }
            Op::GatherRows(a, idx_rows) => {
                let x = val(*a);
                let cols = x.cols();
                let mut gx = vec![0.0; x.len()];
                for (k, &r) in idx_rows.iter().enumerate() {
                    for (o, v) in gx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&g.data()[k * cols..(k + 1) * cols])
                    {
                        *o += v;
                    }
                }
                vec![(*a, Array::new(x.shape().to_vec(), gx)?)]
            }
            Op::CrossEntropy(a, targets) => {
                let x = val(*a);
                let p = softmax_values(x, 1)?;
                let rows = x.rows();
                let cols = x.cols();
                let scale = g.item() / rows as f64;
                let mut gx = p.into_data();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * cols + t] -= 1.0;
                }
                for v in gx.iter_mut() {
                    *v *= scale;
                }
                vec![(*a, Array::new(x.shape().to_vec(), gx)?)]
            }
            Op::Entropy(a) => {
                let gv = g.item();
                vec![(
                    *a,
                    val(*a).map(|p| if p > 0.0 { -(p.ln() + 1.0) * gv } else { 0.0 }),
                )]
            }
        })
    }
}

pub(crate) fn softmax_values(x: &Array, axis: usize) -> Result<Array> {
    let (outer, r, inner) = axis_split(x.shape(), axis)?;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * r + j) * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..r {
                m = m.max(x.data()[idx(j)]);
            }
            let mut s = 0.0;
            for j in 0..r {
                let e = (x.data()[idx(j)] - m).exp();
                out[idx(j)] = e;
                s += e;
            }
            for j in 0..r {
                out[idx(j)] /= s;
            }
        }
    }
    Array::new(x.shape().to_vec(), out)
}

/// Softmax of a plain array, outside any graph.
pub fn softmax(x: &Array, axis: usize) -> Result<Array> {
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    softmax_values(x, axis)
}
