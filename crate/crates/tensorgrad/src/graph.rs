//! Tape of recorded operations and the reverse sweep over it.
//!
//! Every value produced by an op is appended to the tape together with the
//! op's backward closure. Nodes whose inputs do not require gradients store
//! no closure, so frozen sub-networks cost nothing on the reverse pass.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Read-only view handed to backward implementations.
pub(crate) struct Ctx<'a, T> {
    nodes: &'a [Node<T>],
    out: usize,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn output(&self) -> &'a Tensor<T> {
        &self.nodes[self.out].value
    }

    pub fn input(&self, i: usize) -> &'a Tensor<T> {
        let v = self.nodes[self.out].inputs[i];
        &self.nodes[v.0].value
    }
}

/// Gradient rule of a recorded op. Returns one entry per input; entries for
/// inputs with `needs[i] == false` may be `None`.
pub(crate) type BackwardFn<T> = dyn Fn(&Ctx<'_, T>, &[T], &[bool]) -> Vec<Option<Vec<T>>>;

pub(crate) struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<BackwardFn<T>>>,
}

/// Reverse-mode tape. One graph per forward pass; gradients are read back
/// with [`Graph::grad`] after [`Graph::backward`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
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
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. `requires_grad` marks it as a differentiation
    /// target.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
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

    /// Gradient accumulated for `v` by the last [`Graph::backward`] call.
    /// Only leaves keep their gradient after the sweep.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad matches value shape"))
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        op: impl Fn(&Ctx<'_, T>, &[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<BackwardFn<T>>> = if requires_grad {
            Some(Box::new(op))
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates d(loss)/d(node) to every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(out_grad) = self.grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let ctx = Ctx {
                nodes: &self.nodes,
                out: i,
            };
            let input_grads = op(&ctx, &out_grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (v, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[v.0].value.numel());
                match &mut self.grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
