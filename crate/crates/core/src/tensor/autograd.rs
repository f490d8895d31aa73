//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape index is already a
//! topological order and `backward` is a single reverse sweep. A node requires
//! a gradient iff one of its parents does; subgraphs that only touch frozen
//! leaves are skipped entirely during the sweep.

use super::{
    add_channel_bias, add_row_bias, check_labels, conv2d_backward_input, conv2d_backward_kernel,
    matmul, matmul_nt, matmul_tn, relu, softmax_rows, ConvGeometry, Tensor,
};
use crate::error::{Error, Result};

/// A trainable value with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Variable {
    value: Tensor,
    grad: Tensor,
    requires_grad: bool,
}

impl Variable {
    pub fn new(value: Tensor, requires_grad: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            requires_grad,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Adds the gradient recorded for `node`, if this variable is trainable.
    pub fn accumulate(&mut self, grads: &Gradients, node: NodeId) {
        if !self.requires_grad {
            return;
        }
        if let Some(g) = grads.get(node) {
            self.grad.add_assign(g);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Work performed on a tape, in multiply-adds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeCounters {
    pub forward_macs: u64,
    pub backward_macs: u64,
    /// Gradient kernels evaluated for leaf nodes, i.e. parameter gradients.
    pub param_grad_kernels: u64,
}

impl std::ops::AddAssign for TapeCounters {
    fn add_assign(&mut self, rhs: Self) {
        self.forward_macs += rhs.forward_macs;
        self.backward_macs += rhs.backward_macs;
        self.param_grad_kernels += rhs.param_grad_kernels;
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    AddChannelBias(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geometry: ConvGeometry,
    },
    Relu(NodeId),
    Reshape(NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counters: TapeCounters,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counters(&self) -> TapeCounters {
        self.counters
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Records the current value of `var` as a leaf.
    pub fn variable(&mut self, var: &Variable) -> NodeId {
        self.leaf(var.value.clone(), var.requires_grad)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul(self.value(a), self.value(b))?;
        let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
        self.counters.forward_macs += (m * k * value.shape()[1]) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = add_row_bias(self.value(x), self.value(bias))?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, rg, Op::AddRowBias(x, bias)))
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = add_channel_bias(self.value(x), self.value(bias))?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, rg, Op::AddChannelBias(x, bias)))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let geometry = ConvGeometry::new(
            self.value(input).shape(),
            self.value(kernel).shape(),
            stride,
            padding,
        )?;
        let value = super::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        self.counters.forward_macs += geometry.macs();
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                geometry,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = relu(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Elementwise product of equal-shaped nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, rg, Op::Sum(x))
    }

    /// Mean softmax cross-entropy of `logits [N×C]` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        check_labels(lv, labels)?;
        let loss = super::softmax_cross_entropy(lv, labels)?;
        let probs = softmax_rows(lv)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    /// Propagates d`loss`/d(node) back to every node that requires a gradient.
    ///
    /// Only parents flagged `requires_grad` get a gradient kernel evaluated, so
    /// frozen parameters cost nothing beyond the activations flowing through them.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contributions: Vec<(NodeId, Tensor)> = Vec::with_capacity(2);
            let mut backward_macs = 0u64;
            let needs = |id: NodeId| self.nodes[id.0].requires_grad;

            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let macs = (av.shape()[0] * av.shape()[1] * bv.shape()[1]) as u64;
                    if needs(*a) {
                        contributions.push((*a, matmul_nt(&g, bv)));
                        backward_macs += macs;
                    }
                    if needs(*b) {
                        contributions.push((*b, matmul_tn(av, &g)));
                        backward_macs += macs;
                    }
                }
                Op::AddRowBias(x, bias) => {
                    if needs(*bias) {
                        let n = self.value(*bias).len();
                        let mut gb = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        contributions.push((*bias, Tensor::new(vec![n], gb)?));
                    }
                    if needs(*x) {
                        contributions.push((*x, g.clone()));
                    }
                }
                Op::AddChannelBias(x, bias) => {
                    if needs(*bias) {
                        let shape = g.shape();
                        let c = shape[1];
                        let plane = shape[2] * shape[3];
                        let mut gb = vec![0.0; c];
                        for (i, chunk) in g.data().chunks(plane).enumerate() {
                            gb[i % c] += chunk.iter().sum::<f64>();
                        }
                        contributions.push((*bias, Tensor::new(vec![c], gb)?));
                    }
                    if needs(*x) {
                        contributions.push((*x, g.clone()));
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    geometry,
                } => {
                    if needs(*input) {
                        contributions.push((
                            *input,
                            conv2d_backward_input(geometry, &g, self.value(*kernel)),
                        ));
                        backward_macs += geometry.macs();
                    }
                    if needs(*kernel) {
                        contributions.push((
                            *kernel,
                            conv2d_backward_kernel(geometry, &g, self.value(*input)),
                        ));
                        backward_macs += geometry.macs();
                    }
                }
                Op::Relu(x) => {
                    let gx = self.value(*x).zip_map(&g, |v, gv| if v > 0.0 { gv } else { 0.0 })?;
                    contributions.push((*x, gx));
                }
                Op::Reshape(x) => {
                    contributions.push((*x, g.reshape(self.value(*x).shape())?));
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        contributions.push((*a, g.zip_map(self.value(*b), |x, y| x * y)?));
                    }
                    if needs(*b) {
                        contributions.push((*b, g.zip_map(self.value(*a), |x, y| x * y)?));
                    }
                }
                Op::Sum(x) => {
                    let scale = g.data()[0];
                    contributions.push((*x, Tensor::filled(self.value(*x).shape(), scale)));
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.data()[0] / labels.len() as f64;
                    let c = probs.shape()[1];
                    let mut gl = probs.clone();
                    for (row, &label) in gl.data_mut().chunks_mut(c).zip(labels) {
                        row[label] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    contributions.push((*logits, gl));
                }
            }

            self.counters.backward_macs += backward_macs;
            for (parent, contrib) in contributions {
                if self.is_leaf(parent) {
                    self.counters.param_grad_kernels += 1;
                }
                match &mut grads[parent.0] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Leaf gradients are the output; keep them.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}
