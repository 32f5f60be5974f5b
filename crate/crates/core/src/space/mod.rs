//! The DAG cell search space.
//!
//! A cell has two input states (`c_{k-2}`, `c_{k-1}`) and `N` intermediate
//! nodes. Intermediate node `n` may read from every earlier state, so it has
//! `n + 2` candidate in-edges; edges are numbered node-major. Every derived
//! architecture keeps exactly two in-edges per intermediate node.
//!
//! Three search methods share the space:
//!
//! - [`SearchMethod::RomeV1`]: one categorical per node over unordered
//!   predecessor pairs, then one operation per selected edge.
//! - [`SearchMethod::RomeV2`]: Gumbel-Top2 over per-edge topology logits, then
//!   one operation per selected edge.
//! - [`SearchMethod::GdasBaseline`]: every edge is active with one sampled
//!   operation; two edges per node are kept only at derivation time.

mod genotype;
mod law;
mod network;
mod params;
mod sample;

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use genotype::{
    collapse_metrics, derive_genotype, CellGenotype, CollapseMetrics, Genotype,
};
pub use law::{architecture_log_prob, cell_log_prob, enumerate_cell_choices, pair_probability};
pub use network::{forward_single_path, ForwardOutput, SupernetWeights};
pub use params::{ArchParams, CellTopology};
pub use sample::{
    choose_hard, sample_architecture, sample_architecture_hard, sample_ops, sample_topology_v1,
    sample_topology_v2, ArchChoice, ArchNoise, CellChoice, CellGates, CellNoise,
    OpSample, Provenance, SampledArchitecture, TopologySample,
};

/// Candidate operation on an edge. Vector analogs of the image-scale
/// operations: only `LinSmall` and `LinLarge` own weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// Outputs zeros.
    Zero,
    /// Identity (pairwise mean pooling on reducing edges).
    Skip,
    /// Mean over fixed contiguous groups of features.
    Avg,
    /// Identity plus N(0, 1) noise.
    Noise,
    /// `relu(x W)`.
    LinSmall,
    /// `relu(relu(x W1) W2)` through a hidden layer twice as wide.
    LinLarge,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::Zero,
        OpKind::Skip,
        OpKind::Avg,
        OpKind::Noise,
        OpKind::LinSmall,
        OpKind::LinLarge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Skip => "skip",
            OpKind::Avg => "avg",
            OpKind::Noise => "noise",
            OpKind::LinSmall => "lin_small",
            OpKind::LinLarge => "lin_large",
        }
    }

    pub fn is_parameterless(self) -> bool {
        !matches!(self, OpKind::LinSmall | OpKind::LinLarge)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown operation {s:?}")))
    }
}

/// Named operation sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpSetName {
    /// zero, skip, avg, lin_small, lin_large.
    #[serde(rename = "S0'", alias = "S0")]
    S0,
    /// lin_small, skip.
    #[serde(rename = "S2'", alias = "S2")]
    S2,
    /// lin_small, skip, zero.
    #[serde(rename = "S3'", alias = "S3")]
    S3,
    /// lin_small, noise.
    #[serde(rename = "S4'", alias = "S4")]
    S4,
}

impl OpSetName {
    pub fn ops(self) -> Vec<OpKind> {
        use OpKind::*;
        match self {
            OpSetName::S0 => alloc::vec![Zero, Skip, Avg, LinSmall, LinLarge],
            OpSetName::S2 => alloc::vec![LinSmall, Skip],
            OpSetName::S3 => alloc::vec![LinSmall, Skip, Zero],
            OpSetName::S4 => alloc::vec![LinSmall, Noise],
        }
    }
}

/// Normal cells keep the working width; the reduction cell halves it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Normal,
    Reduction,
}

impl CellType {
    pub const BOTH: [CellType; 2] = [CellType::Normal, CellType::Reduction];

    pub fn index(self) -> usize {
        match self {
            CellType::Normal => 0,
            CellType::Reduction => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduction => "reduction",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    RomeV1,
    RomeV2,
    GdasBaseline,
}

impl SearchMethod {
    pub fn name(self) -> &'static str {
        match self {
            SearchMethod::RomeV1 => "rome_v1",
            SearchMethod::RomeV2 => "rome_v2",
            SearchMethod::GdasBaseline => "gdas_baseline",
        }
    }
}

impl fmt::Display for SearchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SearchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SearchMethod::RomeV1,
            SearchMethod::RomeV2,
            SearchMethod::GdasBaseline,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::config(format!("unknown search method {s:?}")))
    }
}

/// Shape of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    /// Always 2.
    pub num_inputs: usize,
    pub num_intermediate: usize,
    pub op_set: Vec<OpKind>,
    /// Working vector width of normal cells at the network input.
    pub feature_dim: usize,
}

impl CellSpec {
    pub fn new(num_intermediate: usize, op_set: Vec<OpKind>, feature_dim: usize) -> Self {
        CellSpec {
            num_inputs: 2,
            num_intermediate,
            op_set,
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_inputs != 2 {
            return Err(Error::config("cells have exactly two input states"));
        }
        if self.num_intermediate == 0 {
            return Err(Error::config("cells need at least one intermediate node"));
        }
        if self.op_set.is_empty() {
            return Err(Error::config("operation set is empty"));
        }
        let mut seen = self.op_set.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.op_set.len() {
            return Err(Error::config("operation set has duplicates"));
        }
        if self.feature_dim < 2 {
            return Err(Error::config("feature_dim must be at least 2"));
        }
        Ok(())
    }

    pub fn num_ops(&self) -> usize {
        self.op_set.len()
    }

    /// Candidate predecessors of intermediate node `node`.
    pub fn num_predecessors(&self, node: usize) -> usize {
        node + self.num_inputs
    }

    /// `sum_n (n + 2)`: 14 for four intermediate nodes.
    pub fn num_edges(&self) -> usize {
        (0..self.num_intermediate)
            .map(|n| self.num_predecessors(n))
            .sum()
    }

    /// Index of the edge `pred -> node`.
    pub fn edge_index(&self, node: usize, pred: usize) -> usize {
        debug_assert!(pred < self.num_predecessors(node));
        (0..node).map(|n| self.num_predecessors(n)).sum::<usize>() + pred
    }

    /// `(node, pred)` of an edge index.
    pub fn edge_endpoints(&self, edge: usize) -> (usize, usize) {
        let mut rest = edge;
        for n in 0..self.num_intermediate {
            let k = self.num_predecessors(n);
            if rest < k {
                return (n, rest);
            }
            rest -= k;
        }
        panic!("edge {edge} out of range");
    }

    /// Unordered predecessor pairs `(i, k)`, `i < k`, in lexicographic order.
    pub fn pairs(&self, node: usize) -> Vec<(usize, usize)> {
        let n = self.num_predecessors(node);
        let mut out = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for k in i + 1..n {
                out.push((i, k));
            }
        }
        out
    }

    pub fn pair_index(&self, node: usize, pair: (usize, usize)) -> usize {
        let (i, k) = if pair.0 < pair.1 { pair } else { (pair.1, pair.0) };
        self.pairs(node)
            .iter()
            .position(|&p| p == (i, k))
            .expect("pair out of range")
    }

    /// Topology scalars per cell for a method: 20 (v1) or 14 (v2) at N = 4.
    pub fn topology_param_count(&self, method: SearchMethod) -> usize {
        (0..self.num_intermediate)
            .map(|n| {
                let k = self.num_predecessors(n);
                match method {
                    SearchMethod::RomeV1 => k * (k - 1) / 2,
                    SearchMethod::RomeV2 => k,
                    SearchMethod::GdasBaseline => 0,
                }
            })
            .sum()
    }
}

/// Whole network: a stem, `num_cells` cells with the middle one reduced,
/// and a linear classifier over the last cell's concatenated nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub cell: CellSpec,
    pub input_dim: usize,
    pub num_classes: usize,
    pub num_cells: usize,
}

/// Widths seen by one cell of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellLayout {
    pub cell_type: CellType,
    pub in0_dim: usize,
    pub in1_dim: usize,
    /// Width of the preprocessed input states.
    pub state_dim: usize,
    /// Width of each intermediate node.
    pub node_dim: usize,
}

impl CellLayout {
    /// Edges leaving an input state of a reduction cell halve the width.
    pub fn edge_dims(&self, pred: usize) -> (usize, usize) {
        if pred < 2 {
            (self.state_dim, self.node_dim)
        } else {
            (self.node_dim, self.node_dim)
        }
    }

    pub fn output_dim(&self, num_intermediate: usize) -> usize {
        self.node_dim * num_intermediate
    }
}

/// Smallest node width a network may use.
pub const MIN_WIDTH: usize = 4;

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        if self.input_dim == 0 || self.num_classes < 2 || self.num_cells == 0 {
            return Err(Error::config(
                "network needs input_dim >= 1, num_classes >= 2, num_cells >= 1",
            ));
        }
        if self.reduction_index().is_some() && self.cell.feature_dim % 2 != 0 {
            return Err(Error::config("feature_dim must be even when a cell reduces"));
        }
        // a standardized row of width w keeps w - 2 degrees of freedom
        let narrowest = self.layouts().iter().map(|l| l.node_dim).min().unwrap_or(0);
        if narrowest < MIN_WIDTH {
            return Err(Error::config(format!(
                "cells narrower than {MIN_WIDTH} lose their input to normalization (narrowest {narrowest})"
            )));
        }
        Ok(())
    }

    /// The reduced cell, if the network has at least two cells.
    pub fn reduction_index(&self) -> Option<usize> {
        (self.num_cells >= 2).then_some(self.num_cells / 2)
    }

    pub fn cell_type(&self, c: usize) -> CellType {
        if Some(c) == self.reduction_index() {
            CellType::Reduction
        } else {
            CellType::Normal
        }
    }

    pub fn layouts(&self) -> Vec<CellLayout> {
        let d = self.cell.feature_dim;
        let n = self.cell.num_intermediate;
        let mut out: Vec<CellLayout> = Vec::with_capacity(self.num_cells);
        let mut width = d;
        for c in 0..self.num_cells {
            let dim_of = |idx: Option<usize>, out: &Vec<CellLayout>| match idx {
                Some(i) => out[i].output_dim(n),
                None => d,
            };
            let in0 = dim_of(c.checked_sub(2), &out);
            let in1 = dim_of(c.checked_sub(1), &out);
            let cell_type = self.cell_type(c);
            let state_dim = width;
            if cell_type == CellType::Reduction {
                width /= 2;
            }
            out.push(CellLayout {
                cell_type,
                in0_dim: in0,
                in1_dim: in1,
                state_dim,
                node_dim: width,
            });
        }
        out
    }

    pub fn classifier_in_dim(&self) -> usize {
        self.layouts()
            .last()
            .map(|l| l.output_dim(self.cell.num_intermediate))
            .unwrap_or(self.cell.feature_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn darts_cell() -> CellSpec {
        CellSpec::new(4, OpSetName::S0.ops(), 16)
    }

    #[test]
    fn structural_constants() {
        let c = darts_cell();
        assert_eq!(c.num_edges(), 14);
        assert_eq!(c.topology_param_count(SearchMethod::RomeV1), 20);
        assert_eq!(c.topology_param_count(SearchMethod::RomeV2), 14);
        assert_eq!(2 * c.topology_param_count(SearchMethod::RomeV1), 40);
        assert_eq!(2 * c.topology_param_count(SearchMethod::RomeV2), 28);
        let pair_counts: Vec<usize> = (0..4).map(|n| c.pairs(n).len()).collect();
        assert_eq!(pair_counts, vec![1, 3, 6, 10]);
    }

    #[test]
    fn edge_indexing_round_trips() {
        let c = darts_cell();
        for e in 0..c.num_edges() {
            let (n, p) = c.edge_endpoints(e);
            assert_eq!(c.edge_index(n, p), e);
        }
        assert_eq!(c.edge_index(3, 4), 13);
    }

    #[test]
    fn layouts_halve_at_the_middle_cell() {
        let spec = NetworkSpec {
            cell: darts_cell(),
            input_dim: 2,
            num_classes: 3,
            num_cells: 4,
        };
        let l = spec.layouts();
        assert_eq!(spec.reduction_index(), Some(2));
        assert_eq!(
            l.iter().map(|x| x.node_dim).collect::<Vec<_>>(),
            vec![16, 16, 8, 8]
        );
        assert_eq!(l[2].edge_dims(0), (16, 8));
        assert_eq!(l[2].edge_dims(3), (8, 8));
        assert_eq!(l[3].in0_dim, 64);
        assert_eq!(l[3].in1_dim, 32);
        assert_eq!(spec.classifier_in_dim(), 32);
    }

    #[test]
    fn op_names_parse() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert!("conv".parse::<OpKind>().is_err());
    }
}
