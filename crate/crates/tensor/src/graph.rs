use crate::ops::Op;
use crate::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T: Real> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Append-only tape of recorded operations.
///
/// Nodes are stored in creation order, so every node's parents precede it and
/// a single reverse sweep visits each node exactly once.
pub struct Graph<T: Real = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    pub(crate) sabotage: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            sabotage: false,
        }
    }

    /// Debug switch that deliberately corrupts the matmul backward rule.
    /// Only useful as a negative control for gradient checkers.
    pub fn set_sabotage(&mut self, on: bool) {
        self.sabotage = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients on
    /// [`backward`](Self::backward).
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite("leaf"));
        }
        Ok(self.push_raw(value, Op::Leaf, requires_grad))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar)
        }
    }

    pub(crate) fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let value = &self.nodes[loss.0].value;
        if value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(value.shape().to_vec()));
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite("loss"));
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            crate::ops::backward_node(&self.nodes, id, &g, &mut grads, self.sabotage);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite("gradient"));
                }
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Gradient of the last backward sweep with respect to `v`, if `v`
    /// participates in it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).ok()
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }
}
