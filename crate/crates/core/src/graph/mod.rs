//! Reverse-mode automatic differentiation.
//!
//! Forward values are computed eagerly when a node is recorded. Nodes are
//! appended in evaluation order, so the tape itself is a topological order
//! and `backward` is a single reverse sweep.

pub(crate) mod check;
mod rules;

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

pub use check::{grad_check, relative_error, NOISE_FLOOR, GradCheckOptions, GradCheckReport, LeafCheck};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Operation tags with a registered forward and backward rule.
#[derive(Debug, Clone, PartialEq)]
pub enum OpTag {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(f64),
    MulScalar(f64),
    Relu,
    Ln,
    Exp,
    Softplus,
    ChannelSoftmax,
    Sum,
    Mean,
    Conv2d(ConvGeometry),
    Upsample2x,
    Concat,
    SliceChannels { start: usize, len: usize },
    SelectRow(usize),
    /// Inputs `(x: H×W×D, alpha: H×W, r: D)`, output `2×D` with rows (mean, variance).
    WeightedMoments,
    /// Inputs `(x: H×W×D, comp_0, .., comp_{K-1})`, each component `2×D`; output `H×W×K`.
    Scores,
    /// `(1 - λ)·prev + λ·fresh`.
    EmaBlend(f64),
    StopGradient,
    /// Pixel-mean two-class cross-entropy of `H×W×2` logits against a binary target.
    CrossEntropy(Tensor),
    /// Softmax aggregation of per-object `H×W×1` probabilities, clamped to `[ε, 1-ε]`.
    Aggregate { eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<OpTag>,
    parents: Vec<usize>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    fault_injection: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault_injection: false,
        }
    }

    /// Test hook: corrupts the input-gradient rule of `Scores` so that
    /// gradient checks have a negative control.
    pub fn set_fault_injection(&mut self, on: bool) {
        self.fault_injection = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Option<OpTag>, parents: Vec<usize>, rg: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad: rg,
        });
        NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, None, Vec::new(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, None, Vec::new(), false)
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id || id.index >= self.nodes.len() {
            return Err(Error::ForeignNode(id.index));
        }
        Ok(id.index)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        assert_eq!(id.tape, self.id, "node from another tape");
        &self.nodes[id.index].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.index].requires_grad
    }

    /// Records `op` applied to `inputs`, computing its value eagerly.
    pub fn record(&mut self, op: OpTag, inputs: &[NodeId]) -> Result<NodeId> {
        let parents = inputs
            .iter()
            .map(|&i| self.check(i))
            .collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = parents.iter().map(|&p| &self.nodes[p].value).collect();
        let value = rules::forward(&op, &values)?;
        let rg = !matches!(op, OpTag::StopGradient)
            && parents.iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push(value, Some(op), parents, rg))
    }

    /// Reverse sweep from `root`. Every trainable leaf gets an entry, zero if
    /// unreachable.
    pub fn backward(&self, root: NodeId, seed: &Tensor) -> Result<Gradients> {
        let root = self.check(root)?;
        if seed.shape() != self.nodes[root].value.shape() {
            return Err(Error::shape(format!(
                "seed {:?} vs root {:?}",
                seed.shape(),
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(seed.clone());
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let wanted: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let contribs =
                rules::backward(op, &inputs, &node.value, &g, &wanted, self.fault_injection)?;
            for ((&p, c), want) in node.parents.iter().zip(contribs).zip(wanted) {
                let (Some(c), true) = (c, want) else { continue };
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let mut leaves = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op.is_none() && node.requires_grad {
                let g = match grads.get_mut(i).and_then(Option::take) {
                    Some(g) => g,
                    None => Tensor::zeros(node.value.shape()),
                };
                leaves.insert(i, g);
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
        })
    }

    /// Hash of everything that selects a piece of a piecewise-smooth
    /// function: the recorded op sequence, relu input signs and aggregation
    /// clamp activity. Two evaluations with equal signatures lie on the same
    /// smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.nodes.len().hash(&mut h);
        for node in &self.nodes {
            let Some(op) = &node.op else { continue };
            std::mem::discriminant(op).hash(&mut h);
            match op {
                OpTag::Relu => {
                    for v in self.nodes[node.parents[0]].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                OpTag::Aggregate { eps } => {
                    for &p in &node.parents {
                        for v in self.nodes[p].value.data() {
                            (*v < *eps, *v > 1.0 - eps).hash(&mut h);
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    // Convenience wrappers used throughout the model code.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpTag::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpTag::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpTag::Mul, &[a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpTag::Relu, &[a])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId> {
        let neg = self.record(OpTag::MulScalar(-1.0), &[a])?;
        self.record(OpTag::AddScalar(1.0), &[neg])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpTag::Sum, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpTag::ChannelSoftmax, &[a])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, g: ConvGeometry) -> Result<NodeId> {
        self.record(OpTag::Conv2d(g), &[x, w, b])
    }

    pub fn upsample2x(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpTag::Upsample2x, &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.record(OpTag::Concat, parts)
    }

    pub fn slice_channels(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.record(OpTag::SliceChannels { start, len }, &[a])
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpTag::StopGradient, &[a])
    }

    /// Zeros shaped like `a`, as a constant.
    pub fn zeros_like(&mut self, a: NodeId) -> NodeId {
        let z = Tensor::zeros(self.value(a).shape());
        self.constant(z)
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }
}

/// Gradients of the trainable leaves of one tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        if id.tape != self.tape {
            return None;
        }
        self.leaves.get(&id.index)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        if id.tape != self.tape {
            return None;
        }
        self.leaves.remove(&id.index)
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
