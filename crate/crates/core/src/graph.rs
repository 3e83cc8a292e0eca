//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its output value and a backward closure. [`Graph::backward`] walks the nodes
//! in reverse creation order, which is a valid topological order because a node
//! can only depend on nodes created before it.
//!
//! Parameters enter the graph through [`Graph::param`]; each [`ParamId`] maps to
//! a single leaf so gradients from repeated uses accumulate in one place.

use std::collections::HashMap;

use crate::error::{ReidError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `(grad_out, parent values, output value, which parents need a gradient)`.
pub(crate) type BackwardFn =
    Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    mode: Mode,
    grad_enabled: bool,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    stat_updates: Vec<(ParamId, Tensor)>,
    grads: Vec<Option<Tensor>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Graph {
            store,
            mode,
            grad_enabled: true,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            stat_updates: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// A graph that records no backward closures; for inference.
    pub fn inference(store: &'s ParamStore) -> Self {
        let mut g = Self::new(store, Mode::Eval);
        g.grad_enabled = false;
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        let requires_grad = self.grad_enabled;
        self.push_leaf(value, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// The leaf bound to a stored parameter (created on first use).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store;
        let trainable = store.param(id).kind == crate::params::ParamKind::Trainable;
        let v = self.push_leaf(store.get(id).clone(), trainable && self.grad_enabled);
        self.param_vars.insert(id, v);
        v
    }

    /// Stored value of a parameter or buffer, without creating a node.
    pub fn param_value(&self, id: ParamId) -> &'s Tensor {
        self.store.get(id)
    }

    pub(crate) fn record_stat_update(&mut self, id: ParamId, value: Tensor) {
        self.stat_updates.push((id, value));
    }

    /// Running-statistic updates produced by training-mode forwards.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation. The closure is dropped when no parent needs a
    /// gradient.
    pub(crate) fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagates from a scalar (single-element) output.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let seed = {
            let v = &self.nodes[loss.0].value;
            if v.len() != 1 {
                return Err(ReidError::shape(
                    "backward",
                    format!("loss must be scalar, got {:?}", v.shape()),
                ));
            }
            Tensor::ones(v.shape())
        };
        self.backward_with(loss, seed)
    }

    /// Backpropagates an arbitrary upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, grad_out: Tensor) -> Result<()> {
        if grad_out.shape() != self.shape(out) {
            return Err(ReidError::shape(
                "backward",
                format!("seed {:?} vs output {:?}", grad_out.shape(), self.shape(out)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(grad_out);
        for i in (0..=out.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Some(backward) = &node.backward {
                let parent_values: Vec<&Tensor> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect();
                let parent_grads = backward(&grad, &parent_values, &node.value, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                    let (Some(pg), true) = (pg, *need) else {
                        continue;
                    };
                    debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(grad);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter touched by the last backward.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::new();
        let w = store.trainable("w", Tensor::from_fn(&[3], |i| i as f64 + 1.0));
        let mut g = Graph::new(&store, Mode::Train);
        let a = g.param(w);
        let b = g.param(w);
        assert_eq!(a, b);
        let prod = g.mul(a, b).unwrap();
        let loss = g.sum(prod);
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn inference_graph_records_nothing() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::ones(&[2]));
        let y = g.relu(x);
        assert!(!g.requires_grad(y));
    }
}
