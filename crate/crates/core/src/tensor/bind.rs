use alloc::vec;
use alloc::vec::Vec;

use super::{Gradients, Graph, Tensor, Var};
use crate::Result;

/// Lazily records a flat parameter list onto a graph.
///
/// Only parameters actually requested are placed on the tape, so parameters
/// that a forward pass never touches have no node and an exact zero gradient.
#[derive(Debug)]
pub struct Binder<'a> {
    tensors: &'a [Tensor],
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    /// `trainable` decides whether bound parameters receive gradients.
    pub fn new(tensors: &'a [Tensor], trainable: bool) -> Self {
        Binder {
            tensors,
            vars: vec![None; tensors.len()],
            trainable,
        }
    }

    pub fn tensor(&self, id: usize) -> &'a Tensor {
        &self.tensors[id]
    }

    pub fn var(&mut self, graph: &mut Graph, id: usize) -> Result<Var> {
        if let Some(v) = self.vars[id] {
            return Ok(v);
        }
        let t = self.tensors[id].clone();
        let v = if self.trainable {
            graph.param(t)?
        } else {
            graph.constant(t)?
        };
        self.vars[id] = Some(v);
        Ok(v)
    }

    pub fn is_bound(&self, id: usize) -> bool {
        self.vars[id].is_some()
    }

    pub fn bound_count(&self) -> usize {
        self.vars.iter().filter(|v| v.is_some()).count()
    }

    /// Per-parameter gradients in parameter order; unbound parameters get
    /// zeros.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(self.tensors)
            .map(|(v, t)| match v {
                Some(v) => grads.get_or_zeros(*v, t.len()),
                None => vec![0.0; t.len()],
            })
            .collect()
    }
}
