//! Reverse-mode tape.
//!
//! Every operation on [`Var`]s appends a node holding the indices of its
//! inputs and, when any input requires a gradient, a closure computing the
//! vector-Jacobian product. [`Tape::backward`] walks the nodes in reverse
//! creation order, so each node is visited once and gradients of a value
//! consumed several times are summed.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Vector-Jacobian product: given the output gradient and a mask of which
/// inputs need gradients, return one optional gradient per input.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    // Accumulated gradients of leaves, indexed by node id.
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// Recording of differentiable operations. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A tensor value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    id: usize,
    requires_grad: bool,
    value: Rc<Tensor>,
    tape: Tape,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("requires_grad", &self.requires_grad)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Vec::new(), requires_grad, None)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Tensor,
        inputs: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            inputs,
            requires_grad,
            backward,
        });
        Var {
            id,
            requires_grad,
            value: Rc::new(value),
            tape: self.clone(),
        }
    }

    /// Appends the result of an operation. The backward closure is only kept
    /// when at least one input participates in differentiation.
    pub(crate) fn record(
        &self,
        value: Tensor,
        inputs: &[&Var],
        backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Result<Var> {
        for v in inputs {
            if !Rc::ptr_eq(&v.tape.inner, &self.inner) {
                return Err(TensorError::ForeignTape);
            }
        }
        let requires_grad = inputs.iter().any(|v| v.requires_grad);
        let ids = inputs.iter().map(|v| v.id).collect();
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        Ok(self.push(value, ids, requires_grad, backward))
    }

    /// Back-propagates from a one-element `loss`, adding into the gradient
    /// of every leaf that requires one. Calling it again without
    /// [`zero_grad`](Self::zero_grad) accumulates.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if !Rc::ptr_eq(&loss.tape.inner, &self.inner) {
            return Err(TensorError::ForeignTape);
        }
        if loss.value.len() != 1 {
            return Err(TensorError::invalid(
                "backward",
                loss.value.shape(),
                "loss must be a scalar",
            ));
        }
        if !loss.requires_grad {
            return Ok(());
        }
        let mut inner = self.inner.borrow_mut();
        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.id] = Some(vec![1.0]);
        if inner.leaf_grads.len() < inner.nodes.len() {
            let len = inner.nodes.len();
            inner.leaf_grads.resize_with(len, || None);
        }
        let TapeInner { nodes, leaf_grads } = &mut *inner;
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => {
                    if node.requires_grad {
                        accumulate(&mut leaf_grads[id], g);
                    }
                }
                Some(f) => {
                    let needs: Vec<bool> =
                        node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                    let input_grads = f(&g, &needs);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for ((&input, gi), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                        if let (Some(gi), true) = (gi, *need) {
                            accumulate(&mut grads[input], gi);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf, `None` if nothing reached it.
    pub fn grad(&self, var: &Var) -> Option<Tensor> {
        let inner = self.inner.borrow();
        inner
            .leaf_grads
            .get(var.id)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(var.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().leaf_grads.clear();
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Gradient accumulated on this leaf by [`Tape::backward`].
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(self)
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }
}
