use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::params::CellTopology;
use super::{ArchChoice, ArchParams, CellChoice, CellSpec, CellType, OpKind, SearchMethod};
use crate::tensor::numeric;
use crate::{Error, Result};

/// Discrete architecture of one cell type. Each intermediate node lists its
/// two `(predecessor, op)` in-edges with ascending predecessors; predecessors
/// 0 and 1 are the cell inputs, `2 + n` is intermediate node `n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellGenotype {
    #[serde(rename = "type")]
    pub cell_type: CellType,
    pub nodes: Vec<[(usize, OpKind); 2]>,
}

/// Derived architecture: two in-edges per node, one operation per edge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub version: SearchMethod,
    pub cells: Vec<CellGenotype>,
}

impl Genotype {
    pub fn cell(&self, t: CellType) -> Option<&CellGenotype> {
        self.cells.iter().find(|c| c.cell_type == t)
    }

    pub fn normal(&self) -> Option<&CellGenotype> {
        self.cell(CellType::Normal)
    }

    /// Checks the two-in-edge invariant and membership in `spec`.
    pub fn validate(&self, spec: &CellSpec) -> Result<()> {
        for t in CellType::BOTH {
            let cell = self
                .cell(t)
                .ok_or_else(|| Error::contract(format!("genotype has no {} cell", t.name())))?;
            if cell.nodes.len() != spec.num_intermediate {
                return Err(Error::contract(format!(
                    "{} cell has {} nodes, expected {}",
                    t.name(),
                    cell.nodes.len(),
                    spec.num_intermediate
                )));
            }
            for (n, [(a, oa), (b, ob)]) in cell.nodes.iter().enumerate() {
                if a == b || *a.max(b) >= spec.num_predecessors(n) {
                    return Err(Error::contract(format!(
                        "{} node {n}: predecessors {a}, {b} invalid",
                        t.name()
                    )));
                }
                for op in [oa, ob] {
                    if !spec.op_set.contains(op) {
                        return Err(Error::contract(format!("operation {op} not in op set")));
                    }
                }
            }
        }
        if self.cells.len() != 2 {
            return Err(Error::contract("genotype must have one normal and one reduction cell"));
        }
        Ok(())
    }

    /// The fixed architecture this genotype describes, as a ROME-style choice
    /// with two active edges per node.
    pub fn to_choice(&self, spec: &CellSpec) -> Result<ArchChoice> {
        self.validate(spec)?;
        let cell_choice = |t: CellType| {
            let cell = self.cell(t).expect("validated");
            let mut selected = vec![false; spec.num_edges()];
            let mut ops = vec![None; spec.num_edges()];
            for (n, edges) in cell.nodes.iter().enumerate() {
                for (pred, op) in edges {
                    let e = spec.edge_index(n, *pred);
                    selected[e] = true;
                    ops[e] = spec.op_set.iter().position(|o| o == op);
                }
            }
            CellChoice { selected, ops }
        };
        Ok(ArchChoice {
            method: SearchMethod::RomeV2,
            cells: [cell_choice(CellType::Normal), cell_choice(CellType::Reduction)],
        })
    }
}

fn node_entry(
    spec: &CellSpec,
    n: usize,
    (i, k): (usize, usize),
    op_of: impl Fn(usize) -> usize,
) -> [(usize, OpKind); 2] {
    let (i, k) = (i.min(k), i.max(k));
    let ei = spec.edge_index(n, i);
    let ek = spec.edge_index(n, k);
    [(i, spec.op_set[op_of(ei)]), (k, spec.op_set[op_of(ek)])]
}

/// Ops eligible for the baseline's edge ranking: all but `zero`, unless the
/// set has nothing else.
fn ranked_ops(spec: &CellSpec) -> Vec<usize> {
    let non_zero: Vec<usize> = (0..spec.num_ops())
        .filter(|&o| spec.op_set[o] != OpKind::Zero)
        .collect();
    if non_zero.is_empty() {
        (0..spec.num_ops()).collect()
    } else {
        non_zero
    }
}

/// Most likely discrete architecture under the learned parameters.
///
/// - v1: per node the pair with the largest logit, then the most likely
///   operation on each of its edges.
/// - v2: per node the two edges with the largest logits, then the most likely
///   operation per edge.
/// - baseline: per node the two edges whose strongest non-zero operation is
///   most probable, each with that operation.
///
/// Ties go to the lowest index.
pub fn derive_genotype(params: &ArchParams) -> Genotype {
    let spec = params.cell();
    let mut cells = Vec::with_capacity(2);
    for t in CellType::BOTH {
        let best_op = |e: usize| numeric::argmax(params.alpha(t, e).data());
        let nodes = (0..spec.num_intermediate)
            .map(|n| match params.topology() {
                CellTopology::Pairs => {
                    let beta = params.beta(t, n).expect("pair logits");
                    let pair = spec.pairs(n)[numeric::argmax(beta.data())];
                    node_entry(spec, n, pair, best_op)
                }
                CellTopology::Edges => {
                    let beta = params.beta(t, n).expect("edge logits");
                    let pair = numeric::top2(beta.data());
                    node_entry(spec, n, pair, best_op)
                }
                CellTopology::Dense => {
                    let eligible = ranked_ops(spec);
                    let best = |e: usize| -> (usize, f64) {
                        let p = params.op_probs(t, e);
                        let mut best = eligible[0];
                        for &o in &eligible[1..] {
                            if p[o] > p[best] {
                                best = o;
                            }
                        }
                        (best, p[best])
                    };
                    let strengths: Vec<f64> = (0..spec.num_predecessors(n))
                        .map(|pred| best(spec.edge_index(n, pred)).1)
                        .collect();
                    let pair = numeric::top2(&strengths);
                    node_entry(spec, n, pair, |e| best(e).0)
                }
            })
            .collect();
        cells.push(CellGenotype {
            cell_type: t,
            nodes,
        });
    }
    Genotype {
        version: params.method(),
        cells,
    }
}

/// How much of a cell collapsed onto parameterless operations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    pub parameterless_fraction: f64,
    pub skip_count: usize,
    /// Count per operation of the op set, in op-set order.
    pub histogram: Vec<(OpKind, usize)>,
}

pub fn collapse_metrics(cell: &CellGenotype, op_set: &[OpKind]) -> CollapseMetrics {
    let ops: Vec<OpKind> = cell.nodes.iter().flatten().map(|(_, op)| *op).collect();
    let parameterless = ops.iter().filter(|o| o.is_parameterless()).count();
    CollapseMetrics {
        parameterless_fraction: if ops.is_empty() {
            0.0
        } else {
            parameterless as f64 / ops.len() as f64
        },
        skip_count: ops.iter().filter(|o| **o == OpKind::Skip).count(),
        histogram: op_set
            .iter()
            .map(|k| (*k, ops.iter().filter(|o| *o == k).count()))
            .collect(),
    }
}
