//! Tape-based reverse-mode automatic differentiation.
//!
//! Ops append nodes to a [`Tape`] in execution order, which is therefore a
//! topological order: every node's inputs precede it. [`Tape::backward`]
//! sweeps the tape once in reverse, handing each node's output gradient to
//! its recorded backward rule and accumulating the returned parent gradients
//! additively, in a fixed left-to-right parent order. Fan-out therefore sums
//! deterministically and every node is visited exactly once.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub type NodeId = usize;

/// Backward rule: maps the gradient at the node's output to one gradient per
/// recorded parent, in parent order.
type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
    shape: Shape,
}

/// A tensor plus its tape handle. `node == None` means the value is a
/// constant: no gradient flows to or through it. The tape id guards against
/// looking a node up on the wrong tape.
#[derive(Clone, Debug)]
pub struct Var {
    pub value: Tensor,
    pub node: Option<NodeId>,
    tape_id: u64,
}

impl Var {
    /// A value outside the tape; gradients stop here.
    pub fn constant(value: Tensor) -> Var {
        Var {
            value,
            node: None,
            tape_id: 0,
        }
    }

    /// Same value, cut loose from the tape.
    pub fn detach(&self) -> Var {
        Var::constant(self.value.clone())
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    id: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        use std::sync::atomic::{AtomicU64, Ordering};
        static NEXT: AtomicU64 = AtomicU64::new(1);
        Tape {
            nodes: Vec::new(),
            id: NEXT.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (parameter or gradcheck input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            parents: Vec::new(),
            backward: None,
            shape: value.shape(),
        });
        Var {
            value,
            node: Some(id),
            tape_id: self.id,
        }
    }

    /// Record an interior node. `parents` lists the node ids of the inputs
    /// that participate in differentiation; `backward` must return one
    /// gradient tensor per parent, in the same order. If `parents` is empty
    /// the result is a constant and nothing is recorded.
    pub fn push(
        &mut self,
        value: Tensor,
        parents: Vec<NodeId>,
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var {
        if parents.is_empty() {
            return Var::constant(value);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            parents,
            backward: Some(Box::new(backward)),
            shape: value.shape(),
        });
        Var {
            value,
            node: Some(id),
            tape_id: self.id,
        }
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients; look
    /// them up with [`Grads::of`].
    pub fn backward(&self, loss: &Var) -> Result<Grads> {
        let loss_id = loss.node.ok_or_else(|| {
            Error::shape("backward", "loss is a constant; nothing to differentiate")
        })?;
        if !loss.shape().is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar 1x1x1x1, got {}", loss.shape()),
            ));
        }
        assert_eq!(loss.tape_id, self.id, "loss belongs to a different tape");
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss_id] = Some(Tensor::ones(Shape::scalar()));
        for id in (0..=loss_id).rev() {
            let Some(grad_out) = slots[id].clone() else {
                continue;
            };
            let node = &self.nodes[id];
            let Some(backward) = &node.backward else {
                continue; // leaves keep their accumulated gradient
            };
            debug_assert_eq!(grad_out.shape(), node.shape, "gradient shape drift");
            let parent_grads = backward(&grad_out);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, g) in node.parents.iter().zip(parent_grads) {
                debug_assert!(pid < id, "tape out of topological order");
                match &mut slots[pid] {
                    Some(acc) => *acc = acc.add(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Grads {
            slots,
            tape_id: self.id,
        })
    }
}

#[derive(Debug)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
    tape_id: u64,
}

impl Grads {
    /// Gradient of the loss w.r.t. `var`, if any flowed to it. A var from a
    /// different tape yields `None` rather than a wrong slot.
    pub fn of(&self, var: &Var) -> Option<&Tensor> {
        if var.tape_id != self.tape_id {
            return None;
        }
        var.node.and_then(|id| self.slots.get(id)?.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let loss = ops::sum_all(&mut tape, &x);
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.of(&x).unwrap().bits_eq(&Tensor::ones(x.shape())));
    }

    #[test]
    fn grad_of_sum_of_squares_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 0.5]).unwrap());
        let sq = ops::mul(&mut tape, &x, &x).unwrap();
        let loss = ops::sum_all(&mut tape, &sq);
        let grads = tape.backward(&loss).unwrap();
        let expected = x.value.scale(2.0);
        assert!(grads.of(&x).unwrap().bits_eq(&expected));
    }

    #[test]
    fn fanout_accumulates_additively() {
        // y = x + x; dL/dx for L = sum(y) is exactly 2 everywhere.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 3.0));
        let y = ops::add(&mut tape, &x, &x).unwrap();
        let loss = ops::sum_all(&mut tape, &y);
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.of(&x).unwrap().bits_eq(&Tensor::full(x.shape(), 2.0)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)));
        let y = ops::scale(&mut tape, &x, 2.0);
        let err = tape.backward(&y).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn constants_do_not_record() {
        let mut tape = Tape::new();
        let a = Var::constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
        let b = Var::constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
        let c = ops::add(&mut tape, &a, &b).unwrap();
        assert!(tape.is_empty());
        assert!(!c.requires_grad());
    }

    #[test]
    fn grads_reject_vars_from_another_tape() {
        let mut tape_a = Tape::new();
        let mut tape_b = Tape::new();
        let xa = tape_a.leaf(Tensor::scalar(2.0));
        let xb = tape_b.leaf(Tensor::scalar(5.0));
        let loss = ops::sum_all(&mut tape_a, &xa);
        let grads = tape_a.backward(&loss).unwrap();
        assert!(grads.of(&xa).is_some());
        assert!(grads.of(&xb).is_none());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::scalar(), 2.0));
        let y = ops::mul(&mut tape, &x, &x).unwrap();
        let loss = ops::sum_all(&mut tape, &y.detach());
        assert!(!loss.requires_grad());
    }
}
