//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! creation order, which is also a topological order. [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients into the owning
//! [`ParamStore`]. Nodes whose inputs do not require gradients carry no
//! backward closure, so frozen sub-networks cost nothing on the way back.

mod attention;
pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod ops;
mod param;
mod spectral;
mod tensor;

use std::sync::atomic::{AtomicU64, Ordering};

pub use attention::Attention;
pub use ops::softplus_inv;
pub use param::{Adam, AdamConfig, ParamId, ParamStore, Parameter, Precision};
pub use tensor::Tensor;

use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&Graph, &[f64], &mut Grads)>;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    graph: u64,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
    backward: Option<BackwardFn>,
}

/// Computation tape. Confined to one thread; build a new one per step.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "variable {} does not belong to this graph",
                v.idx
            )));
        }
        Ok(v.idx)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false, None)
    }

    /// Leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true, None)
    }

    /// Leaf bound to a stored parameter. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.leaf(p.value.clone(), !p.frozen, Some(id))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.push(value, requires_grad, param, None)
    }

    fn push(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        param: Option<ParamId>,
        backward: Option<BackwardFn>,
    ) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            param,
            backward: if requires_grad { backward } else { None },
        });
        Var {
            idx,
            graph: self.id,
        }
    }

    /// Record an op result. `backward` is dropped when no parent needs gradient.
    pub(crate) fn record(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.idx].requires_grad);
        self.push(value, requires_grad, None, Some(backward))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.idx].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    pub(crate) fn data(&self, idx: usize) -> &[f64] {
        self.nodes[idx].value.data()
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added to
    /// `store` (never overwritten); frozen parameters are left untouched.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        self.backward_into(loss, &mut [store])
    }

    /// As [`Graph::backward`] for graphs mixing parameters of several
    /// stores; each gradient goes to the store that owns the parameter.
    pub fn backward_into(&self, loss: Var, stores: &mut [&mut ParamStore]) -> Result<Gradients> {
        let grads = self.backward_raw(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.bufs[idx].as_ref()) {
                let owner = stores.iter_mut().find(|s| s.owns(id)).ok_or_else(|| {
                    Error::Graph("graph uses a parameter from a store that was not supplied".into())
                })?;
                owner.accumulate_grad(id, g);
            }
        }
        Ok(Gradients {
            graph: self.id,
            bufs: grads.bufs,
        })
    }

    fn backward_raw(&self, loss: Var) -> Result<Grads> {
        let root = self.check(loss)?;
        let node = &self.nodes[root];
        if node.value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads = Grads {
            bufs: (0..self.nodes.len()).map(|_| None).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if !node.requires_grad {
            return Ok(grads);
        }
        grads.bufs[root] = Some(vec![1.0]);
        for idx in (0..=root).rev() {
            let Some(bw) = self.nodes[idx].backward.as_ref() else {
                continue;
            };
            // Leaves keep their buffers; interior nodes hand theirs down.
            let Some(g) = grads.bufs[idx].take() else {
                continue;
            };
            bw(self, &g, &mut grads);
            grads.bufs[idx] = Some(g);
        }
        Ok(grads)
    }
}

/// Per-node gradient buffers during the reverse pass.
pub(crate) struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
}

impl Grads {
    /// Mutable gradient buffer for `v`, or `None` when `v` needs no gradient.
    pub(crate) fn slot(&mut self, g: &Graph, v: Var) -> Option<&mut [f64]> {
        if !self.requires[v.idx] {
            return None;
        }
        let len = g.nodes[v.idx].value.len();
        Some(self.bufs[v.idx].get_or_insert_with(|| vec![0.0; len]))
    }

    pub(crate) fn add(&mut self, g: &Graph, v: Var, delta: &[f64]) {
        if let Some(buf) = self.slot(g, v) {
            for (d, x) in buf.iter_mut().zip(delta) {
                *d += x;
            }
        }
    }
}

/// Gradients of one reverse pass, keyed by variable.
pub struct Gradients {
    graph: u64,
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph {
            return None;
        }
        self.bufs.get(v.idx)?.as_deref()
    }
}
