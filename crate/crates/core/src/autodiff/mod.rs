//! Minimal reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation as it runs; [`Var`] is a cheap handle
//! into it. Calling [`Tape::backward`] on a scalar walks the records in
//! reverse creation order (which is a topological order) exactly once and
//! returns vector-Jacobian products for every trainable leaf.
//!
//! Broadcasting is limited to bias addition over the last axis; all other
//! binary ops demand identical shapes.
//!
//! The tape is generic over [`Real`] so the same model code runs in `f32` for
//! training and in `f64` as a shadow for gradient verification.

mod ops;
mod tensor;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use thiserror::Error;

use crate::real::Real;

pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    BadShape { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already back-propagated; reset it before calling backward again")]
    AlreadyBackpropagated,
    #[error("{op}: index {index} out of range for {len} rows")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("custom node failed: {0}")]
    Custom(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Vector-Jacobian product: output gradient in, one gradient per input out.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    trainable: bool,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    spent: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T> Copy for Var<'_, T> {}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            spent: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every record so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.spent.set(false);
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable input whose gradient [`backward`](Self::backward) reports.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            trainable: true,
            needs_grad: true,
        })
    }

    /// A fixed input; no gradient flows into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            trainable: false,
            needs_grad: false,
        })
    }

    pub(crate) fn record(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: BackwardFn<T>) -> Var<'_, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let needs_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].needs_grad)
        };
        self.push_node(Node {
            value: Rc::new(value),
            parents: ids,
            backward: needs_grad.then_some(backward),
            trainable: false,
            needs_grad,
        })
    }

    /// Record a user-defined operation. `forward` sees the input values and
    /// returns the output plus its vector-Jacobian product.
    pub fn custom<'t, F>(&'t self, inputs: &[Var<'t, T>], forward: F) -> Result<Var<'t, T>>
    where
        F: FnOnce(&[&Tensor<T>]) -> Result<(Tensor<T>, BackwardFn<T>)>,
    {
        let values: Vec<Rc<Tensor<T>>> = inputs.iter().map(|v| v.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let (out, back) = forward(&refs)?;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let checked: BackwardFn<T> = Box::new(move |g| {
            let grads = back(g);
            assert_eq!(grads.len(), shapes.len(), "custom backward returned wrong number of gradients");
            for (gr, s) in grads.iter().zip(&shapes) {
                assert_eq!(gr.shape(), s.as_slice(), "custom backward gradient shape");
            }
            grads
        });
        Ok(self.record(out, inputs, checked))
    }

    /// Reverse sweep from a scalar `loss`. May be called once per reset.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.spent.get() {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.len() != 1 {
            return Err(AutodiffError::NotScalar(loss_shape));
        }
        self.spent.set(true);
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(&loss_shape, T::one()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = back(&g);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].needs_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            if node.trainable {
                grads[id] = Some(g);
            }
        }
        let leaves = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, n)| {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                (i, g)
            })
            .collect();
        Ok(Gradients { by_id: leaves })
    }
}

/// Leaf gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    by_id: Vec<(usize, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, leaf: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_id
            .binary_search_by_key(&leaf.id, |(i, _)| *i)
            .ok()
            .map(|k| &self.by_id[k].1)
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = x.sum();
        assert!(tape.backward(loss).is_ok());
        assert_eq!(tape.backward(loss).unwrap_err(), AutodiffError::AlreadyBackpropagated);
        tape.reset();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = x.sum();
        assert!(tape.backward(loss).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::NotScalar(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.leaf(Tensor::zeros(&[2]));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![3.0]).unwrap());
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0]);
    }
}
