//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records one forward pass. Leaves are either constants, free
//! variables, or parameters bound from a [`ParamStore`]; after
//! [`Tape::backward`] the parameter gradients are collected into
//! [`Gradients`] and handed to an [`optim::Optimizer`].

mod ops;
pub mod optim;
mod params;
pub mod schedule;
mod tensor;

use std::collections::HashMap;

use thiserror::Error;

pub use ops::OpKind;
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("axis {axis} invalid for rank-{rank} input of {op}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite gradient for parameter {index} ({name})")]
    NonFiniteGradient { index: usize, name: String },
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    op: Option<OpKind>,
    inputs: Vec<Var>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Record of a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
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

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: None, inputs: Vec::new(), requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf that receives `d(root)/d(leaf)` on backward.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Binds a trainable parameter; repeated binds return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.bind(store, id, true)
    }

    /// Binds a parameter as a constant, so no gradient flows into it.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.bind(store, id, false)
    }

    fn bind(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push_leaf(store.get(id).clone(), trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Records `op` applied to `inputs`.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let value = ops::forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op: Some(op), inputs: inputs.to_vec(), requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates `d(root)/d(·)` to every reachable leaf that requires grad.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<(), AutodiffError> {
        let shape = self.nodes[root.0].value.shape();
        if self.nodes[root.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(shape.to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(op) = &node.op else {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            };
            let wants: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let grads = ops::backward(op, &inputs, &node.value, &g, &wants);
            for (input, grad) in node.inputs.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    /// Gradients of every trainable parameter bound on this tape.
    pub fn param_grads(&self, store: &ParamStore) -> Gradients {
        let mut grads = Gradients::new(store.len());
        for (&id, &v) in &self.bound {
            if let Some(g) = self.grad(v) {
                grads.set(id, g.to_vec());
            }
        }
        grads
    }

    /// Like [`Tape::param_grads`] but moves the buffers out of the tape.
    pub fn into_param_grads(mut self, store: &ParamStore) -> Gradients {
        let mut grads = Gradients::new(store.len());
        for (&id, &v) in &self.bound {
            if let Some(g) = self.nodes[v.0].grad.take() {
                grads.set(id, g);
            }
        }
        grads
    }

    // Convenience wrappers. All shape errors surface as `AutodiffError`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Transpose, &[a])
    }

    /// `x wᵀ` for a weight stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::MatMulNt, &[x, w])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Shift(c), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Slice { axis, start, end }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Reshape { shape: shape.to_vec() }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Sqrt, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Square, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(OpKind::SumAxis { axis }, &[a])
    }

    pub fn outer(&mut self, u: Var, v: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Outer, &[u, v])
    }

    pub fn elu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Elu { alpha: 1.0 }, &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, AutodiffError> {
        self.apply(OpKind::LeakyRelu { slope }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Softmax { axis }, &[a])
    }

    pub fn conv_transpose1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var, AutodiffError> {
        self.apply(OpKind::ConvTranspose1d { stride, padding }, &[x, w])
    }

    pub fn conv1d(&mut self, y: Var, w: Var, stride: usize, padding: usize) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Conv1d { stride, padding }, &[y, w])
    }
}
