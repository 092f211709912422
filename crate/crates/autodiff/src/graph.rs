//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order. Node
//! inputs always precede the node, so the tape is acyclic by construction
//! and the backward pass is a single reverse sweep.

use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{Float, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
    #[error("{0} has nothing to average over")]
    Empty(&'static str),
    #[error("custom op {name}: {detail}")]
    Custom { name: String, detail: String },
}

pub type Result<T> = std::result::Result<T, GraphError>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> GraphError {
    GraphError::ShapeMismatch { op, detail: detail.into() }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
pub trait CustomOp<T: Float>: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Gradients for each input given the output gradient; `None` for inputs
    /// the op does not differentiate.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

#[derive(Clone)]
pub(crate) enum Op<T: Float> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddBcast(usize, usize),
    MulBcast(usize, usize),
    Scale(usize, T),
    Abs(usize),
    Gelu(usize),
    Sigmoid(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    Bmm { a: usize, b: usize, trans_b: bool },
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: (usize, usize), pad: (usize, usize) },
    ConvT2d { x: usize, w: usize, b: Option<usize>, stride: (usize, usize), pad: (usize, usize) },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    SumAll(usize),
    MeanAll(usize),
    GatherRows { table: usize, idx: Vec<usize> },
    ReplaceRows { x: usize, emb: usize, mask: Vec<bool> },
    L2Normalize(usize),
    CrossEntropy { logits: usize, targets: Vec<(usize, usize)> },
    Custom { op: Arc<dyn CustomOp<T>>, inputs: Vec<usize> },
}

impl<T: Float> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddBcast(a, b) | MulBcast(a, b) => vec![*a, *b],
            Scale(a, _) | Abs(a) | Gelu(a) | Sigmoid(a) | Softmax(a) | LogSoftmax(a) | Reshape(a) | Permute(a, _) | SumAll(a)
            | MeanAll(a) | L2Normalize(a) => vec![*a],
            Linear { x, w, b } | Conv2d { x, w, b, .. } | ConvT2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Bmm { a, b, .. } => vec![*a, *b],
            BatchNorm { x, gamma, beta, .. } | LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            GatherRows { table, .. } => vec![*table],
            ReplaceRows { x, emb, .. } => vec![*x, *emb],
            CrossEntropy { logits, .. } => vec![*logits],
            Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node<T: Float> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Single-owner trace of one forward pass.
pub struct Graph<T: Float> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(GraphError::UnknownVar(v.0))
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_op(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.push(value, op, rg)
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let value = {
            let refs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&refs)?
        };
        Ok(self.push_op(value, Op::Custom { op, inputs: inputs.iter().map(|v| v.0).collect() }))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let shape = &self.nodes[loss.0].value.shape;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(GraphError::NotScalar(shape.clone()));
        }
        self.backward_with(loss, Tensor::full(shape, T::one()))
    }

    /// Reverse sweep seeded with an arbitrary output gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.check(out)?;
        if seed.shape != self.nodes[out.0].value.shape {
            return Err(mismatch("backward", format!("seed {:?} vs output {:?}", seed.shape, self.nodes[out.0].value.shape)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (input, contrib) in crate::ops::backward_op(self, i, &g) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of trainable leaves after a backward sweep.
pub struct Gradients<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
