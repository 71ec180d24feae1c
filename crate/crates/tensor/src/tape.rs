//! Define-by-run reverse-mode recording.
//!
//! Every op appends one node holding its forward value. Nodes whose inputs
//! all lack gradient tracking are stored as constants without a closure, so
//! frozen subgraphs cost nothing on the way back.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees when it runs.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    /// Forward values of the parents, in recording order.
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    /// Whether each parent wants a gradient; closures may skip work for `false`.
    pub needs: Vec<bool>,
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    /// Extended-precision copy of one-element results (reductions and
    /// scalar arithmetic on them); keeps finite differences of losses clean.
    precise: Option<f64>,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying a backward closure.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.backward.is_some()).count()
    }

    /// A leaf that accumulates gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Vec::new(), None)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Vec::new(), None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// The value of a one-element node in f64, using the extended-precision
    /// copy when the producing op kept one.
    pub fn scalar_f64(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        node.precise.unwrap_or_else(|| node.value.item() as f64)
    }

    pub(crate) fn set_precise(&mut self, v: Var, value: f64) {
        self.nodes[v.0].precise = Some(value);
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op result. The closure is dropped when no parent tracks gradient.
    pub fn record(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        if requires_grad {
            self.push(value, true, parents.to_vec(), Some(Box::new(backward)))
        } else {
            self.push(value, false, Vec::new(), None)
        }
    }

    fn push(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            precise: None,
            requires_grad,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient view: same forward value, no path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        let precise = self.nodes[x.0].precise;
        let d = self.constant(value);
        self.nodes[d.0].precise = precise;
        d
    }

    /// Reverse sweep from a one-element `loss`. Gradients are retained for
    /// leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.accumulate(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing reached it.
    pub fn wrt_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}
