//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its adjoint. `Tape::backward` walks the nodes in reverse
//! insertion order, which is a valid topological order because a node can
//! only reference nodes created before it.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::activation::{self, Activation};
use super::conv;
use super::loss;
use super::norm::{self, BnSaved};
use super::pool::{self, PoolMode};
use super::{IntTensor, Real, Tensor};
use crate::error::{Error, Result};

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        stride: usize,
        pad: usize,
    },
    Pool {
        input: usize,
        k: usize,
        mode: PoolMode,
        argmax: Vec<u32>,
    },
    Upsample {
        input: usize,
        factor: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        saved: BnSaved<T>,
    },
    Pointwise {
        input: usize,
        kind: Activation,
    },
    Softmax {
        input: usize,
    },
    Concat {
        inputs: Vec<usize>,
    },
    Mean {
        inputs: Vec<usize>,
    },
    Scale {
        input: usize,
        factor: T,
    },
    Sum {
        input: usize,
    },
    Dot {
        input: usize,
        weights: Rc<Tensor<T>>,
    },
    Combine {
        terms: Vec<(usize, T)>,
    },
    CrossEntropy {
        logits: usize,
        labels: Rc<IntTensor>,
        probs: Vec<T>,
    },
    Mse {
        a: usize,
        b: usize,
    },
    BceLogits {
        input: usize,
        target: T,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => vec![*input, *kernel, *bias],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Pool { input, .. }
            | Op::Upsample { input, .. }
            | Op::Pointwise { input, .. }
            | Op::Softmax { input }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::Dot { input, .. }
            | Op::BceLogits { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Mse { a, b } => vec![*a, *b],
            Op::Concat { inputs } | Op::Mean { inputs } => inputs.clone(),
            Op::Combine { terms } => terms.iter().map(|t| t.0).collect(),
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
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

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that gradients flow into.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), false)
    }

    fn leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = backward_op(&nodes, node, &g)?;
            for (parent, pg) in parent_grads {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn backward_op<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let needs = |id: usize| nodes[id].requires_grad;
    let val = |id: usize| &*nodes[id].value;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            pad,
        } => {
            let grads = conv::backward(
                g,
                val(*input),
                val(*kernel),
                *stride,
                *pad,
                needs(*input),
                needs(*kernel),
            );
            if let Some(dx) = grads.input {
                out.push((*input, dx));
            }
            if let Some(dw) = grads.kernel {
                out.push((*kernel, dw));
            }
            if needs(*bias) {
                out.push((*bias, conv::bias_grad(g)));
            }
        }
        Op::Pool {
            input,
            k,
            mode,
            argmax,
        } => out.push((*input, pool::backward(g, val(*input).shape(), *k, *mode, argmax))),
        Op::Upsample { input, factor } => {
            out.push((*input, pool::upsample_backward(g, val(*input).shape(), *factor)))
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            saved,
        } => {
            let grads = norm::backward(g, val(*gamma), saved);
            out.push((*input, grads.input));
            out.push((*gamma, grads.gamma));
            out.push((*beta, grads.beta));
        }
        Op::Pointwise { input, kind } => {
            out.push((*input, activation::backward(*kind, g, val(*input), &node.value)))
        }
        Op::Softmax { input } => out.push((*input, activation::softmax_backward(g, &node.value))),
        Op::Concat { inputs } => {
            let shapes: Vec<&[usize]> = inputs.iter().map(|&i| val(i).shape()).collect();
            for (id, part) in inputs.iter().zip(pool::split_channels(g, &shapes)) {
                out.push((*id, part));
            }
        }
        Op::Mean { inputs } => {
            let share = T::one() / T::from_f64(inputs.len() as f64);
            for &id in inputs {
                out.push((id, g.map(|x| x * share)));
            }
        }
        Op::Scale { input, factor } => out.push((*input, g.map(|x| x * *factor))),
        Op::Sum { input } => {
            let s = g.item();
            out.push((*input, Tensor::full(val(*input).shape().to_vec(), s)));
        }
        Op::Dot { input, weights } => {
            let s = g.item();
            out.push((*input, weights.map(|w| w * s)));
        }
        Op::Combine { terms } => {
            let s = g.item();
            for &(id, c) in terms {
                out.push((id, Tensor::scalar(c * s)));
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => out.push((
            *logits,
            loss::cross_entropy_backward(g.item(), val(*logits).shape(), labels, probs),
        )),
        Op::Mse { a, b } => {
            let (da, db) = loss::mse_backward(g.item(), val(*a), val(*b));
            if needs(*a) {
                out.push((*a, da));
            }
            if needs(*b) {
                out.push((*b, db));
            }
        }
        Op::BceLogits { input, target } => {
            out.push((*input, loss::bce_logits_backward(g.item(), val(*input), *target)))
        }
    }
    Ok(out)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var<'t, T> {
        let value = self.value();
        self.tape.leaf(value, false)
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "variables from different tapes");
    }

    pub(crate) fn borrow_value(&self) -> Ref<'_, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &*n[self.id].value)
    }
}

/// Result of [`Tape::backward`]: one optional gradient per leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub(crate) fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}
