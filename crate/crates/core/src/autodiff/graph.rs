use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use super::params::{ParamGrads, ParamId, ParamSet};
use crate::{Error, Result, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

/// Per-feature batch statistics computed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    pub batch: usize,
}

pub(crate) enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Gelu { a: Var },
    Custom { a: Var, derivative: fn(T, T) -> T },
    EmbeddingBag { table: Var, bags: Vec<Vec<usize>> },
    GatherRows { table: Var, ids: Vec<usize> },
    RouteRows { sources: Vec<Var>, routes: Vec<Option<(usize, usize)>> },
    ConcatCols { parts: Vec<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, stats: Option<BatchStats<T>> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    RowSoftmax { x: Var },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    RowDot { a: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    SigmoidBce { logits: Var, labels: Vec<T>, floor: T },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recorded computation. Nodes are stored in creation (topological) order.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_vars: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf whose gradient can be read with [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a parameter into the graph. Repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = params.is_trainable(id);
        let v = self.push(params.get(id).clone(), Op::Param, trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Batch statistics of a train-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats<T>> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar output, got shape {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), T::one()));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g, &mut grads);
            }
            // only leaves are readable afterwards; intermediate slots are dropped
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads, param_vars: self.param_vars.clone() })
    }

    /// Adds `delta` into the gradient slot of `v` (if it requires grad).
    pub(crate) fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Mutable zero-initialised gradient slot for in-place scatter.
    pub(crate) fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut Tensor<T>> {
        if !self.rg(v) {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Dense per-parameter gradients, zero for parameters the graph never touched.
    pub fn param_grads(&self, params: &ParamSet<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::zeros(params);
        self.accumulate_into(&mut out);
        out
    }

    pub fn accumulate_into(&self, out: &mut ParamGrads<T>) {
        for (&id, &v) in &self.param_vars {
            if let (Some(g), Some(slot)) = (self.wrt(v), out.get_mut(id)) {
                slot.add_assign(g);
            }
        }
    }
}
