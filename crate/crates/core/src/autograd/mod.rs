//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation on a [`Var`] computes
//! its value eagerly and, when any input requires a gradient, records a
//! backward closure holding whatever it saved from the forward pass. Node
//! ids are assigned in creation order, so the tape is always topologically
//! sorted and [`Graph::backward`] is a single reverse sweep.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

mod elementwise;
mod gradcheck;
mod linalg;
mod reduce;
mod shape;

pub use gradcheck::{finite_difference_check, relative_error, store_gradient_check, GRAD_FLOOR};

/// Computes input gradients from the output gradient. The flag slice says
/// which inputs actually need one; entries for the others may be `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    inputs: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({}) {:?}", self.id, self.graph.op_kind(self.id), self.shape())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn op_kind(&self, id: usize) -> &'static str {
        self.nodes.borrow()[id].op
    }

    pub fn inputs_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].inputs.clone()
    }

    fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: if requires_grad { "leaf" } else { "constant" },
            inputs: Vec::new(),
            value,
            requires_grad,
            backward: None,
        });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub(crate) fn push<'g>(
        &'g self,
        op: &'static str,
        inputs: &[Var<'g, T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'g, T> {
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
        #[cfg(debug_assertions)]
        {
            let inputs_finite = ids.iter().all(|&i| nodes[i].value.all_finite());
            debug_assert!(!inputs_finite || value.all_finite(), "{op} produced non-finite values from finite inputs");
        }
        nodes.push(Node {
            op,
            inputs: ids,
            value,
            requires_grad,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Reverse sweep from a scalar `loss`, returning gradients of every leaf
    /// that requires one. Fan-out accumulates.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = backward(&grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[input].value.shape(), "grad shape from {}", node.op);
                grads[input] = Some(match grads[input].take() {
                    Some(acc) => acc.add(&g)?,
                    None => g,
                });
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.graph.nodes.borrow()[self.id].value.shape()[axis]
    }

    pub fn rank(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.rank()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut off from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant(self.value())
    }
}
