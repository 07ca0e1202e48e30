//! Reverse-mode gradient propagation over the fixed set of operations the
//! embedding and loss computations need.
//!
//! A [`GradGraph`] is an append-only tape: every operation evaluates eagerly,
//! stores its value and the ids of its operands, and returns a [`NodeId`].
//! Because operands always exist before the node that consumes them, the
//! insertion order is a topological order and [`GradGraph::backward`] is a
//! single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which slices a softmax normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Every column becomes a probability vector (normalization runs down the
    /// rows). For an `n × d` token matrix this is the token axis.
    #[default]
    Column,
    /// Every row becomes a probability vector.
    Row,
}

/// Elementwise operation kinds, for callers that dispatch on a kind value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Subtract,
    Hadamard,
    Scale(f64),
    Log1m,
    Pow(f64),
}

/// How the right operand of a binary op is stretched over the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    /// `1 × c` repeated over every row.
    Row,
    /// `r × 1` repeated over every column.
    Column,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId, Broadcast),
    Hadamard(NodeId, NodeId, Broadcast),
    Scale(NodeId, f64),
    Log1m(NodeId),
    Ln(NodeId),
    Pow(NodeId, f64),
    ClampMax(NodeId, f64),
    Softmax(NodeId, Axis),
    LogSoftmax(NodeId, Axis),
    /// Input, axis, floor, and the softmax itself.
    SoftmaxComplement(NodeId, Axis, f64, DenseArray),
    MeanRows(NodeId),
    L2Normalize(NodeId, f64),
    Sum(NodeId),
    MaskedSum(NodeId, DenseArray),
    StackRows(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    value: DenseArray,
    op: Op,
    requires_grad: bool,
}

/// Norms at or below this are rejected by [`GradGraph::l2_normalize`].
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Default)]
pub struct GradGraph {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

/// Gradients of a scalar output with respect to every node that needed one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    /// Gradient for `id`. Always present for trainable leaves (zeros when the
    /// output does not depend on the leaf).
    pub fn get(&self, id: NodeId) -> Option<&DenseArray> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, id: NodeId) -> &DenseArray {
        self.get(id).expect("no gradient recorded for node")
    }
}

impl GradGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaves, in registration order.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.values()[0]
    }

    /// Registers a trainable parameter.
    pub fn leaf(&mut self, value: DenseArray) -> NodeId {
        let id = self.push_raw(value, Op::Leaf, true);
        self.leaves.push(id);
        id
    }

    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: DenseArray, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn push(&mut self, value: DenseArray, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].value.shape()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    fn broadcast_kind(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Broadcast> {
        let [r, c] = self.shape(a);
        match self.shape(b) {
            s if s == [r, c] => Ok(Broadcast::None),
            [1, bc] if bc == c => Ok(Broadcast::Row),
            [br, 1] if br == r => Ok(Broadcast::Column),
            s => Err(Error::Dimension {
                op,
                left: [r, c],
                right: s,
            }),
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(NodeId, NodeId, Broadcast) -> Op,
    ) -> Result<NodeId> {
        let bc = self.broadcast_kind(op, a, b)?;
        let lhs = self.value(a);
        let rhs = self.value(b);
        let [r, c] = lhs.shape();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let y = match bc {
                    Broadcast::None => rhs.get(i, j),
                    Broadcast::Row => rhs.get(0, j),
                    Broadcast::Column => rhs.get(i, 0),
                };
                out.push(f(lhs.get(i, j), y));
            }
        }
        let value = DenseArray::from_raw(r, c, out);
        Ok(self.push(value, make(a, b, bc), &[a, b]))
    }

    /// `a + b`; `b` may be a `1 × c` row or `r × 1` column broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("subtract", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("hadamard", a, b, |x, y| x * y, Op::Hadamard)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// `log(1 - x)`, defined for `x < 1`.
    pub fn log1m(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(index) = x.values().iter().position(|&v| !(v < 1.0)) {
            return Err(Error::Domain {
                op: "log1m",
                index,
                value: x.values()[index],
            });
        }
        let value = x.map(|v| libm::log1p(-v));
        Ok(self.push(value, Op::Log1m(a), &[a]))
    }

    /// Natural log, defined for `x > 0`.
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(index) = x.values().iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "ln",
                index,
                value: x.values()[index],
            });
        }
        let value = x.map(libm::log);
        Ok(self.push(value, Op::Ln(a), &[a]))
    }

    /// `x^p`. Non-integer exponents need a nonnegative base.
    pub fn pow(&mut self, a: NodeId, exponent: f64) -> Result<NodeId> {
        let x = self.value(a);
        if libm::trunc(exponent) != exponent {
            if let Some(index) = x.values().iter().position(|&v| v < 0.0) {
                return Err(Error::Domain {
                    op: "pow",
                    index,
                    value: x.values()[index],
                });
            }
        }
        let value = x.map(|v| libm::pow(v, exponent));
        Ok(self.push(value, Op::Pow(a, exponent), &[a]))
    }

    /// `min(x, max)`; the gradient is cut where the clamp is active.
    pub fn clamp_max(&mut self, a: NodeId, max: f64) -> NodeId {
        let value = self.value(a).map(|v| v.min(max));
        self.push(value, Op::ClampMax(a, max), &[a])
    }

    pub fn elementwise(&mut self, kind: Elementwise, operands: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Subtract | Elementwise::Hadamard => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(Error::Usage(alloc::format!(
                "{kind:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        match kind {
            Elementwise::Add => self.add(operands[0], operands[1]),
            Elementwise::Subtract => self.sub(operands[0], operands[1]),
            Elementwise::Hadamard => self.hadamard(operands[0], operands[1]),
            Elementwise::Scale(f) => Ok(self.scale(operands[0], f)),
            Elementwise::Log1m => self.log1m(operands[0]),
            Elementwise::Pow(p) => self.pow(operands[0], p),
        }
    }

    pub fn softmax(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        let value = softmax_values(self.value(a), axis, "softmax")?;
        Ok(self.push(value, Op::Softmax(a, axis), &[a]))
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: Axis) -> Result<NodeId> {
        let x = self.value(a);
        check_axis(x, axis, "log_softmax")?;
        let mut out = x.clone();
        for_each_slice(x.shape(), axis, |idx| {
            let max = idx.clone().map(|k| x.values()[k]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = idx.clone().map(|k| libm::exp(x.values()[k] - max)).sum();
            let lse = max + libm::log(sum);
            for k in idx {
                out.values_mut()[k] = x.values()[k] - lse;
            }
        });
        Ok(self.push(out, Op::LogSoftmax(a, axis), &[a]))
    }

    /// Mean over the rows (tokens) of an `n × d` matrix, giving `1 × d`.
    pub fn mean_over_tokens(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let [n, d] = x.shape();
        if n == 0 {
            return Err(Error::EmptyAxis {
                op: "mean_over_tokens",
                shape: x.shape(),
            });
        }
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let value = DenseArray::from_raw(1, d, out);
        Ok(self.push(value, Op::MeanRows(a), &[a]))
    }

    /// Scales the whole array to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let norm = x.norm();
        if !(norm > NORM_EPSILON) {
            return Err(Error::Degenerate { norm });
        }
        let value = x.map(|v| v / norm);
        Ok(self.push(value, Op::L2Normalize(a, norm), &[a]))
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = DenseArray::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// `Σ w_ij x_ij` over entries with nonzero weight. Entries with zero
    /// weight are skipped entirely, so they may hold infinities.
    pub fn masked_sum(&mut self, a: NodeId, weights: DenseArray) -> Result<NodeId> {
        let x = self.value(a);
        if x.shape() != weights.shape() {
            return Err(Error::Dimension {
                op: "masked_sum",
                left: x.shape(),
                right: weights.shape(),
            });
        }
        let total = x
            .values()
            .iter()
            .zip(weights.values())
            .filter(|(_, &w)| w != 0.0)
            .map(|(v, w)| v * w)
            .sum();
        let value = DenseArray::scalar(total);
        Ok(self.push(value, Op::MaskedSum(a, weights), &[a]))
    }

    /// Stacks `1 × d` rows into a `k × d` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = rows.first() else {
            return Err(Error::EmptyAxis {
                op: "stack_rows",
                shape: [0, 0],
            });
        };
        let d = self.shape(first)[1];
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let s = self.shape(r);
            if s != [1, d] {
                return Err(Error::Dimension {
                    op: "stack_rows",
                    left: [1, d],
                    right: s,
                });
            }
            out.extend_from_slice(self.value(r).values());
        }
        let value = DenseArray::from_raw(rows.len(), d, out);
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rows))
    }

    /// Propagates `d output / d node` back to every node that depends on a
    /// trainable leaf.
    /// `max(1 - softmax(x), floor)` along `axis`. The complement of each entry
    /// is summed from the other entries of its slice rather than subtracted
    /// from one, so it keeps full relative precision as the softmax saturates.
    /// The gradient is cut where the floor is active.
    pub fn softmax_complement(&mut self, a: NodeId, axis: Axis, floor: f64) -> Result<NodeId> {
        let x = self.value(a);
        check_axis(x, axis, "softmax_complement")?;
        let mut probs = x.clone();
        let mut out = x.clone();
        for_each_slice(x.shape(), axis, |idx| {
            let max = idx.clone().map(|k| x.values()[k]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = idx.clone().map(|k| libm::exp(x.values()[k] - max)).collect();
            let total: f64 = e.iter().sum();
            for (j, k) in idx.enumerate() {
                let rest = if e[j] > 0.5 * total {
                    e.iter().enumerate().filter(|&(i, _)| i != j).map(|(_, v)| v).sum()
                } else {
                    total - e[j]
                };
                probs.values_mut()[k] = e[j] / total;
                out.values_mut()[k] = (rest / total).max(floor);
            }
        });
        Ok(self.push(out, Op::SoftmaxComplement(a, axis, floor, probs), &[a]))
    }

    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if out_shape != [1, 1] {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar output, got shape {out_shape:?}"
            )));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(DenseArray::scalar(1.0));
        }
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        for &leaf in &self.leaves {
            if grads[leaf.0].is_none() {
                let [r, c] = self.shape(leaf);
                grads[leaf.0] = Some(DenseArray::zeros(r, c));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<DenseArray>], id: NodeId, g: DenseArray) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, dy: &DenseArray, grads: &mut [Option<DenseArray>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let g = dy.matmul(&self.value(*b).transpose()).expect("matmul grad");
                    self.accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    let g = self.value(*a).transpose().matmul(dy).expect("matmul grad");
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, dy.transpose()),
            Op::Add(a, b, bc) => {
                self.accumulate(grads, *a, dy.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, reduce_broadcast(dy, *bc));
                }
            }
            Op::Sub(a, b, bc) => {
                self.accumulate(grads, *a, dy.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, reduce_broadcast(dy, *bc).map(|v| -v));
                }
            }
            Op::Hadamard(a, b, bc) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.wants(*a) {
                    let [r, c] = dy.shape();
                    let mut g = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for j in 0..c {
                            let y = match bc {
                                Broadcast::None => bv.get(i, j),
                                Broadcast::Row => bv.get(0, j),
                                Broadcast::Column => bv.get(i, 0),
                            };
                            g.push(dy.get(i, j) * y);
                        }
                    }
                    self.accumulate(grads, *a, DenseArray::from_raw(r, c, g));
                }
                if self.wants(*b) {
                    let g = reduce_broadcast(&dy.zip_map(av, |d, x| d * x), *bc);
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, dy.map(|v| v * f)),
            Op::Log1m(a) => {
                let g = dy.zip_map(self.value(*a), |d, x| -d / (1.0 - x));
                self.accumulate(grads, *a, g);
            }
            Op::Ln(a) => {
                let g = dy.zip_map(self.value(*a), |d, x| d / x);
                self.accumulate(grads, *a, g);
            }
            Op::Pow(a, p) => {
                let p = *p;
                let g = dy.zip_map(self.value(*a), |d, x| d * p * libm::pow(x, p - 1.0));
                self.accumulate(grads, *a, g);
            }
            Op::ClampMax(a, max) => {
                let max = *max;
                let g = dy.zip_map(self.value(*a), |d, x| if x <= max { d } else { 0.0 });
                self.accumulate(grads, *a, g);
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let mut g = dy.zip_map(y, |d, s| d * s);
                for_each_slice(y.shape(), *axis, |idx| {
                    let dot: f64 = idx.clone().map(|k| dy.values()[k] * y.values()[k]).sum();
                    for k in idx {
                        g.values_mut()[k] -= y.values()[k] * dot;
                    }
                });
                self.accumulate(grads, *a, g);
            }
            Op::LogSoftmax(a, axis) => {
                let y = &node.value;
                let mut g = dy.clone();
                for_each_slice(y.shape(), *axis, |idx| {
                    let total: f64 = idx.clone().map(|k| dy.values()[k]).sum();
                    for k in idx {
                        g.values_mut()[k] -= libm::exp(y.values()[k]) * total;
                    }
                });
                self.accumulate(grads, *a, g);
            }
            Op::SoftmaxComplement(a, axis, floor, y) => {
                let dy = dy.zip_map(&node.value, |d, c| if c > *floor { d } else { 0.0 });
                let mut g = dy.zip_map(y, |d, s| -d * s);
                for_each_slice(y.shape(), *axis, |idx| {
                    let dot: f64 = idx.clone().map(|k| dy.values()[k] * y.values()[k]).sum();
                    for k in idx {
                        g.values_mut()[k] += y.values()[k] * dot;
                    }
                });
                self.accumulate(grads, *a, g);
            }
            Op::MeanRows(a) => {
                let [n, d] = self.shape(*a);
                let inv = 1.0 / n as f64;
                let mut g = Vec::with_capacity(n * d);
                for _ in 0..n {
                    g.extend(dy.values().iter().map(|v| v * inv));
                }
                self.accumulate(grads, *a, DenseArray::from_raw(n, d, g));
            }
            Op::L2Normalize(a, norm) => {
                let y = &node.value;
                let dot: f64 = y.values().iter().zip(dy.values()).map(|(u, d)| u * d).sum();
                let g = dy.zip_map(y, |d, u| (d - u * dot) / norm);
                self.accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let [r, c] = self.shape(*a);
                self.accumulate(grads, *a, DenseArray::filled(r, c, dy.values()[0]));
            }
            Op::MaskedSum(a, w) => {
                let d = dy.values()[0];
                self.accumulate(grads, *a, w.map(|v| v * d));
            }
            Op::StackRows(rows) => {
                for (k, &r) in rows.iter().enumerate() {
                    if self.wants(r) {
                        let g = DenseArray::from_raw(1, dy.cols(), dy.row(k).to_vec());
                        self.accumulate(grads, r, g);
                    }
                }
            }
        }
    }
}

fn reduce_broadcast(dy: &DenseArray, bc: Broadcast) -> DenseArray {
    let [r, c] = dy.shape();
    match bc {
        Broadcast::None => dy.clone(),
        Broadcast::Row => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(dy.row(i)) {
                    *o += v;
                }
            }
            DenseArray::from_raw(1, c, out)
        }
        Broadcast::Column => {
            let out = (0..r).map(|i| dy.row(i).iter().sum()).collect();
            DenseArray::from_raw(r, 1, out)
        }
    }
}

fn check_axis(x: &DenseArray, axis: Axis, op: &'static str) -> Result<()> {
    let [r, c] = x.shape();
    let len = match axis {
        Axis::Column => r,
        Axis::Row => c,
    };
    if len == 0 {
        return Err(Error::EmptyAxis { op, shape: [r, c] });
    }
    Ok(())
}

/// Calls `f` with the flat indices of each slice along `axis`.
fn for_each_slice(
    shape: [usize; 2],
    axis: Axis,
    mut f: impl FnMut(core::iter::StepBy<core::ops::Range<usize>>),
) {
    let [r, c] = shape;
    match axis {
        Axis::Column => {
            for j in 0..c {
                f((j..r * c).step_by(c));
            }
        }
        Axis::Row => {
            for i in 0..r {
                f((i * c..(i + 1) * c).step_by(1));
            }
        }
    }
}

/// Max-subtracted softmax over `axis`, outside any graph.
pub fn softmax_values(x: &DenseArray, axis: Axis, op: &'static str) -> Result<DenseArray> {
    check_axis(x, axis, op)?;
    let mut out = x.clone();
    for_each_slice(x.shape(), axis, |idx| {
        let max = idx.clone().map(|k| x.values()[k]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in idx.clone() {
            let e = libm::exp(x.values()[k] - max);
            out.values_mut()[k] = e;
            sum += e;
        }
        for k in idx {
            out.values_mut()[k] /= sum;
        }
    });
    Ok(out)
}
