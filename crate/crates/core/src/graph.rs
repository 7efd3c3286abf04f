//! Dynamic tape for reverse-mode differentiation.
//!
//! Every forward pass records the primitives it executes into a fresh
//! [`Graph`]. `backward` replays the recorded nodes in reverse exactly once.
//! Values that do not depend on any `requires_grad` leaf are stored but no
//! node is recorded for them, so gradient-free evaluation costs nothing extra.

use crate::error::{DfsError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Maps upstream gradients of a node's outputs (absent when an output did not
/// reach the loss) to gradients of its inputs (absent when not needed).
pub type BackwardFn = Box<dyn FnOnce(&[Option<&[f32]>]) -> Vec<Option<Vec<f32>>>>;

struct Node {
    inputs: Vec<Var>,
    outputs: Vec<Var>,
    backward: BackwardFn,
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    links: Vec<(Var, ParamId)>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push(t)
    }

    /// Records a free leaf; its gradient is readable after `backward`.
    pub fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        t.requires_grad = requires_grad;
        t.grad = None;
        self.push(t)
    }

    /// Records a copy of a stored parameter. Frozen parameters and buffers
    /// enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let src = store.get(id);
        let rg = src.requires_grad;
        let v = self.leaf(src.clone(), rg);
        if rg {
            self.links.push((v, id));
        }
        v
    }

    fn push(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.values[v.0].data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.values[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.values[v.0].grad.as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Records a primitive. Outputs require grad iff some input does; the
    /// backward closure is dropped otherwise.
    pub fn record(&mut self, inputs: &[Var], outputs: Vec<Tensor>, backward: BackwardFn) -> Vec<Var> {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        let outs: Vec<Var> = outputs
            .into_iter()
            .map(|mut t| {
                t.requires_grad = rg;
                t.grad = None;
                self.push(t)
            })
            .collect();
        if rg {
            self.nodes.push(Node {
                inputs: inputs.to_vec(),
                outputs: outs.clone(),
                backward,
            });
        }
        outs
    }

    pub(crate) fn record1(&mut self, inputs: &[Var], out: Tensor, backward: BackwardFn) -> Var {
        self.record(inputs, vec![out], backward)[0]
    }

    /// Back-propagates from a scalar `loss`. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(DfsError::Usage("backward called twice on the same graph".into()));
        }
        if self.values[loss.0].numel() != 1 {
            return Err(DfsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.into_iter().rev() {
            if node.outputs.iter().all(|o| grads[o.0].is_none()) {
                continue;
            }
            let input_grads = {
                let upstream: Vec<Option<&[f32]>> =
                    node.outputs.iter().map(|o| grads[o.0].as_deref()).collect();
                (node.backward)(&upstream)
            };
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (inp, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.values[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (t, g) in self.values.iter_mut().zip(grads) {
            if t.requires_grad {
                t.grad = g;
            }
        }
        Ok(())
    }

    /// Adds the gradients of linked parameters into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(v, id) in &self.links {
            let Some(g) = self.values[v.0].grad.as_ref() else { continue };
            let dst = store.get_mut(id);
            match &mut dst.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }
}
