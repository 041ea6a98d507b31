use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{shape_err, Result};

/// Maps the upstream gradient of a node's output to gradients of its inputs,
/// one entry per input (`None` when an input receives nothing).
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Define-by-run operation record.
///
/// Nodes are appended in creation order, so every node's inputs precede it
/// and a single reverse sweep visits each recorded op exactly once.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
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
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf: receives a gradient in [`Tape::backward`].
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Rc::new(value), requires_grad, Vec::new(), None)
    }

    /// Records a custom operation. `backward` is only kept when one of the
    /// inputs requires a gradient.
    pub fn record(
        &self,
        inputs: &[Var<'_, T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        self.record_shared(inputs, Rc::new(value), backward)
    }

    /// [`Tape::record`] for a value the backward closure also holds on to.
    pub fn record_shared(
        &self,
        inputs: &[Var<'_, T>],
        value: Rc<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Var<'_, T> {
        for v in inputs {
            debug_assert!(std::ptr::eq(v.tape, self), "var from a different tape");
        }
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        if requires_grad {
            let parents = inputs.iter().map(|v| v.id).collect();
            self.push(value, true, parents, Some(backward))
        } else {
            self.push(value, false, Vec::new(), None)
        }
    }

    fn push(
        &self,
        value: Rc<Tensor<T>>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss_node.value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            // Interior gradients are consumed here; leaves keep theirs.
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let input_grads = backward(&upstream);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for (&parent, g) in node.parents.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[parent].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    nodes[parent].value.shape(),
                    "gradient shape mismatch for node {parent}"
                );
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign_from(&g),
                    slot => *slot = Some(g),
                }
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var<'_, T>) -> Tensor<T> {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }

    /// Moves the gradient out, leaving zeros behind on later calls.
    pub fn take(&mut self, var: Var<'_, T>) -> Tensor<T> {
        self.grads[var.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }

    pub fn is_reached(&self, var: Var<'_, T>) -> bool {
        self.grads[var.id].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
        let loss = (x * x).sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_param_gets_exact_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let y = tape.param(Tensor::from_f64(&[2], &[5.0, 6.0]).unwrap());
        let g = tape.backward(x.sum()).unwrap();
        assert!(!g.is_reached(y));
        assert_eq!(g.get(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x*x + x) -> 2x + 1
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
        let loss = (x * x + x).sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[3.0, -3.0]);
    }

    #[test]
    fn constants_do_not_record_backward() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(&[2]));
        let b = a * a;
        assert!(!b.requires_grad());
    }
}
