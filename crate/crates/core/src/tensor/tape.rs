use std::cell::{Ref, RefCell};
use std::fmt;

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
    /// Accumulated gradient; only leaves keep one across backward calls.
    pub grad: Option<Vec<T>>,
}

/// Records one forward pass. Nodes are appended in execution order, so the
/// node list is already a topological order and backward walks it in reverse.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
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

    /// Records an input. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let requires_grad = tensor.requires_grad();
        let value = Tensor {
            grad: None,
            ..tensor
        };
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    pub fn value(&self, v: Var<'_, T>) -> Tensor<T> {
        let mut t = self.nodes.borrow()[v.id].value.clone();
        t.requires_grad = false;
        t
    }

    /// Accumulated gradient of a leaf (None if it never took part in a backward pass).
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape.clone(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse pass from a single-element `loss`. Leaf gradients accumulate
    /// across calls; leaves the loss does not depend on receive zeros.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::InvalidArgument("loss belongs to a different tape".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(Error::invalid_shape(
                "backward",
                format!("loss must be a single element, got shape {:?}", loss_node.value.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((id, g));
                continue;
            }
            for (input, gi) in node.op.backward(&nodes, &node.value, &g) {
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (id, g) in leaf_grads {
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        for node in nodes[..=loss.id].iter_mut() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`Tape::backward`].
pub fn backward<T: Scalar>(loss: Var<'_, T>, tape: &Tape<T>) -> Result<()> {
    tape.backward(loss)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(*self)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }
}
