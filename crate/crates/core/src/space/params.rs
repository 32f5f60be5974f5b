use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CellSpec, CellType, SearchMethod};
use crate::tensor::{numeric, Tensor};
use crate::{Error, Result};

/// Magnitude of the uniform noise used by [`ArchParams::init`].
const INIT_SCALE: f64 = 1e-3;

/// What a cell's topology logits index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellTopology {
    /// One logit per unordered predecessor pair of each node.
    Pairs,
    /// One logit per in-edge of each node.
    Edges,
    /// No topology parameters; every edge is active.
    Dense,
}

impl From<SearchMethod> for CellTopology {
    fn from(m: SearchMethod) -> Self {
        match m {
            SearchMethod::RomeV1 => CellTopology::Pairs,
            SearchMethod::RomeV2 => CellTopology::Edges,
            SearchMethod::GdasBaseline => CellTopology::Dense,
        }
    }
}

/// Architecture parameters for both cell types: one operation-logit vector
/// per edge (`alpha`) and, for ROME, one topology-logit vector per
/// intermediate node (`beta`).
///
/// Stored flat so optimizers can treat them as a parameter list. Per cell
/// type the layout is `[alpha(edge 0) .. alpha(edge E-1), beta(node 0) ..]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchParams {
    method: SearchMethod,
    cell: CellSpec,
    tensors: Vec<Tensor>,
}

impl ArchParams {
    /// All-zero logits: uniform operation and topology laws.
    pub fn zeros(method: SearchMethod, cell: CellSpec) -> Result<Self> {
        Self::build(method, cell, |_| 0.0)
    }

    /// Logits drawn uniformly from `[-1e-3, 1e-3]`.
    pub fn init<R: Rng + ?Sized>(method: SearchMethod, cell: CellSpec, rng: &mut R) -> Result<Self> {
        Self::build(method, cell, |_| INIT_SCALE * (2.0 * rng.random::<f64>() - 1.0))
    }

    fn build(method: SearchMethod, cell: CellSpec, mut fill: impl FnMut(usize) -> f64) -> Result<Self> {
        cell.validate()?;
        if method == SearchMethod::RomeV2 && cell.num_predecessors(0) < 2 {
            return Err(Error::contract("Gumbel-Top2 needs two predecessors per node"));
        }
        let mut tensors = Vec::new();
        let mut k = 0;
        let mut vector = |len: usize| {
            let data = (0..len)
                .map(|_| {
                    k += 1;
                    fill(k)
                })
                .collect();
            Tensor::vector(data)
        };
        for _ in CellType::BOTH {
            for _ in 0..cell.num_edges() {
                tensors.push(vector(cell.num_ops()));
            }
            for n in 0..Self::topology_nodes(method, &cell) {
                tensors.push(vector(Self::topology_len(method, &cell, n)));
            }
        }
        Ok(ArchParams {
            method,
            cell,
            tensors,
        })
    }

    fn topology_nodes(method: SearchMethod, cell: &CellSpec) -> usize {
        match CellTopology::from(method) {
            CellTopology::Dense => 0,
            _ => cell.num_intermediate,
        }
    }

    fn topology_len(method: SearchMethod, cell: &CellSpec, node: usize) -> usize {
        let k = cell.num_predecessors(node);
        match CellTopology::from(method) {
            CellTopology::Pairs => k * (k - 1) / 2,
            CellTopology::Edges => k,
            CellTopology::Dense => 0,
        }
    }

    /// Checks a deserialized value against its own cell spec.
    pub fn validate(&self) -> Result<()> {
        let fresh = ArchParams::zeros(self.method, self.cell.clone())?;
        let ok = fresh.tensors.len() == self.tensors.len()
            && fresh
                .tensors
                .iter()
                .zip(&self.tensors)
                .all(|(a, b)| a.shape() == b.shape() && b.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "architecture parameters do not match a {} cell with {} nodes and {} ops",
                self.method,
                self.cell.num_intermediate,
                self.cell.num_ops()
            )))
        }
    }

    pub fn method(&self) -> SearchMethod {
        self.method
    }

    pub fn cell(&self) -> &CellSpec {
        &self.cell
    }

    pub fn topology(&self) -> CellTopology {
        self.method.into()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    fn per_type(&self) -> usize {
        self.cell.num_edges() + Self::topology_nodes(self.method, &self.cell)
    }

    pub fn alpha_id(&self, t: CellType, edge: usize) -> usize {
        debug_assert!(edge < self.cell.num_edges());
        t.index() * self.per_type() + edge
    }

    /// `None` for the dense baseline.
    pub fn topology_id(&self, t: CellType, node: usize) -> Option<usize> {
        (Self::topology_nodes(self.method, &self.cell) > 0)
            .then(|| t.index() * self.per_type() + self.cell.num_edges() + node)
    }

    pub fn alpha(&self, t: CellType, edge: usize) -> &Tensor {
        &self.tensors[self.alpha_id(t, edge)]
    }

    pub fn alpha_mut(&mut self, t: CellType, edge: usize) -> &mut Tensor {
        let id = self.alpha_id(t, edge);
        &mut self.tensors[id]
    }

    pub fn beta(&self, t: CellType, node: usize) -> Option<&Tensor> {
        self.topology_id(t, node).map(|id| &self.tensors[id])
    }

    pub fn beta_mut(&mut self, t: CellType, node: usize) -> Option<&mut Tensor> {
        self.topology_id(t, node).map(|id| &mut self.tensors[id])
    }

    /// Operation probabilities of an edge.
    pub fn op_probs(&self, t: CellType, edge: usize) -> Vec<f64> {
        numeric::softmax(self.alpha(t, edge).data(), 1.0)
    }

    /// Mean operation probability across the edges of a cell type, per op.
    pub fn op_prob_means(&self, t: CellType) -> Vec<f64> {
        let e = self.cell.num_edges();
        let mut means = alloc::vec![0.0; self.cell.num_ops()];
        for edge in 0..e {
            for (m, p) in means.iter_mut().zip(self.op_probs(t, edge)) {
                *m += p / e as f64;
            }
        }
        means
    }

    /// Number of topology scalars in one cell type.
    pub fn topology_scalars_per_cell(&self) -> usize {
        (0..Self::topology_nodes(self.method, &self.cell))
            .map(|n| Self::topology_len(self.method, &self.cell, n))
            .sum()
    }
}
