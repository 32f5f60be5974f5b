use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::params::CellTopology;
use super::{ArchParams, CellSpec, CellType, SearchMethod};
use crate::gumbel::{self, sample_gumbel, CategoricalSample, GumbelNoise};
use crate::tensor::{numeric, Binder, Graph, Tensor, Var};
use crate::{Error, Result};

/// Gumbel noise for one cell type: one vector per intermediate node for the
/// topology (empty for the dense baseline) and one per edge for operations.
///
/// Operation noise is drawn for every edge so the layout does not depend on
/// which edges get selected; only selected edges consume theirs.
#[derive(Clone, Debug, PartialEq)]
pub struct CellNoise {
    pub topology: Vec<GumbelNoise>,
    pub ops: Vec<GumbelNoise>,
}

/// Noise for a whole architecture, indexed by [`CellType::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct ArchNoise {
    pub cells: [CellNoise; 2],
}

impl ArchNoise {
    /// Draws, per cell type, topology noise node by node and then operation
    /// noise edge by edge.
    pub fn draw<R: Rng + ?Sized>(params: &ArchParams, rng: &mut R) -> Self {
        let mut cell = |t: CellType| {
            let spec = params.cell();
            let topology = (0..spec.num_intermediate)
                .filter_map(|n| params.beta(t, n).map(|b| sample_gumbel(b.len(), rng)))
                .collect();
            let ops = (0..spec.num_edges())
                .map(|_| sample_gumbel(spec.num_ops(), rng))
                .collect();
            CellNoise { topology, ops }
        };
        let normal = cell(CellType::Normal);
        let reduction = cell(CellType::Reduction);
        ArchNoise {
            cells: [normal, reduction],
        }
    }
}

/// Hard choices for one cell type.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellChoice {
    /// Per edge: whether the edge is active.
    pub selected: Vec<bool>,
    /// Per edge: index into the op set, `Some` exactly for active edges.
    pub ops: Vec<Option<usize>>,
}

impl CellChoice {
    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|s| **s).count()
    }

    pub fn in_degree(&self, spec: &CellSpec, node: usize) -> usize {
        (0..spec.num_predecessors(node))
            .filter(|&p| self.selected[spec.edge_index(node, p)])
            .count()
    }

    /// Active predecessors of `node`, ascending.
    pub fn predecessors(&self, spec: &CellSpec, node: usize) -> Vec<usize> {
        (0..spec.num_predecessors(node))
            .filter(|&p| self.selected[spec.edge_index(node, p)])
            .collect()
    }

    pub fn validate(&self, spec: &CellSpec, topology: CellTopology) -> Result<()> {
        let e = spec.num_edges();
        if self.selected.len() != e || self.ops.len() != e {
            return Err(Error::contract(format!(
                "cell choice covers {} edges, cell has {e}",
                self.selected.len()
            )));
        }
        for (edge, (&sel, op)) in self.selected.iter().zip(&self.ops).enumerate() {
            match (sel, op) {
                (true, Some(o)) if *o < spec.num_ops() => {}
                (false, None) => {}
                _ => {
                    return Err(Error::contract(format!(
                        "edge {edge}: selected={sel} with op {op:?}"
                    )))
                }
            }
        }
        for n in 0..spec.num_intermediate {
            let want = match topology {
                CellTopology::Dense => spec.num_predecessors(n),
                _ => 2,
            };
            let got = self.in_degree(spec, n);
            if got != want {
                return Err(Error::contract(format!(
                    "node {n} has {got} in-edges, expected {want}"
                )));
            }
        }
        Ok(())
    }
}

/// Hard choices for both cell types.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchChoice {
    pub method: SearchMethod,
    pub cells: [CellChoice; 2],
}

impl ArchChoice {
    pub fn cell(&self, t: CellType) -> &CellChoice {
        &self.cells[t.index()]
    }

    pub fn validate(&self, spec: &CellSpec) -> Result<()> {
        for c in &self.cells {
            c.validate(spec, self.method.into())?;
        }
        Ok(())
    }
}

fn select_topology(
    spec: &CellSpec,
    topology: CellTopology,
    node: usize,
    beta: &[f64],
    noise: &GumbelNoise,
) -> Result<(usize, usize)> {
    match topology {
        CellTopology::Pairs => {
            let idx = numeric::argmax(&gumbel::perturbed_log_probs(beta, noise)?);
            Ok(spec.pairs(node)[idx])
        }
        CellTopology::Edges => {
            let (a, b) = gumbel::gumbel_top2_hard(beta, noise)?;
            Ok((a.min(b), a.max(b)))
        }
        CellTopology::Dense => Err(Error::contract("dense cells have no topology sample")),
    }
}

fn choose_cell(params: &ArchParams, t: CellType, noise: &CellNoise) -> Result<CellChoice> {
    let spec = params.cell();
    let e = spec.num_edges();
    let topology = params.topology();
    let mut selected = vec![topology == CellTopology::Dense; e];
    if topology != CellTopology::Dense {
        for n in 0..spec.num_intermediate {
            let beta = params.beta(t, n).expect("topology parameters");
            let (i, k) = select_topology(spec, topology, n, beta.data(), &noise.topology[n])?;
            selected[spec.edge_index(n, i)] = true;
            selected[spec.edge_index(n, k)] = true;
        }
    }
    let mut ops = vec![None; e];
    for edge in (0..e).filter(|&edge| selected[edge]) {
        let perturbed = gumbel::perturbed_log_probs(params.alpha(t, edge).data(), &noise.ops[edge])?;
        ops[edge] = Some(numeric::argmax(&perturbed));
    }
    Ok(CellChoice { selected, ops })
}

/// Hard architecture from parameters and noise, without a graph.
pub fn choose_hard(params: &ArchParams, noise: &ArchNoise) -> Result<ArchChoice> {
    Ok(ArchChoice {
        method: params.method(),
        cells: [
            choose_cell(params, CellType::Normal, &noise.cells[0])?,
            choose_cell(params, CellType::Reduction, &noise.cells[1])?,
        ],
    })
}

/// Draws noise and returns the hard architecture.
pub fn sample_architecture_hard<R: Rng + ?Sized>(params: &ArchParams, rng: &mut R) -> Result<ArchChoice> {
    choose_hard(params, &ArchNoise::draw(params, rng))
}

/// Relaxed topology sample of one cell, recorded on a graph.
#[derive(Clone, Debug)]
pub struct TopologySample {
    /// Per edge: whether the edge is active.
    pub mask: Vec<bool>,
    /// Per node: active predecessor pair, ascending.
    pub pairs: Vec<(usize, usize)>,
    /// Per edge: straight-through scalar `B_{i,j}` for active edges.
    pub edge_gates: Vec<Option<Var>>,
    /// Per node: relaxed distribution the hard choice came from.
    pub soft: Vec<Var>,
}

/// ROME-v1 topology: per node one Gumbel-Softmax categorical over
/// predecessor pairs, then `B_i = sum of pair indicators containing i`.
pub fn sample_topology_v1(
    graph: &mut Graph,
    spec: &CellSpec,
    betas: &[Var],
    tau: f64,
    noise: &[GumbelNoise],
) -> Result<TopologySample> {
    check_nodes(spec, betas, noise)?;
    let mut out = TopologySample {
        mask: vec![false; spec.num_edges()],
        pairs: Vec::with_capacity(spec.num_intermediate),
        edge_gates: vec![None; spec.num_edges()],
        soft: Vec::with_capacity(spec.num_intermediate),
    };
    for n in 0..spec.num_intermediate {
        let pairs = spec.pairs(n);
        let k = spec.num_predecessors(n);
        if graph.value(betas[n]).len() != pairs.len() {
            return Err(Error::contract(format!(
                "node {n}: {} pair logits for {} pairs",
                graph.value(betas[n]).len(),
                pairs.len()
            )));
        }
        let sample = gumbel::gumbel_softmax(graph, betas[n], tau, &noise[n])?;
        // pair -> predecessor incidence, so B = I . M
        let mut incidence = vec![0.0; pairs.len() * k];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            incidence[p * k + i] = 1.0;
            incidence[p * k + j] = 1.0;
        }
        let m = graph.constant(Tensor::matrix(pairs.len(), k, incidence)?)?;
        let row = graph.reshape(sample.gate, &[1, pairs.len()])?;
        let b = graph.matmul(row, m)?;
        let b = graph.reshape(b, &[k])?;
        let (i, j) = pairs[sample.index];
        for pred in [i, j] {
            let e = spec.edge_index(n, pred);
            out.mask[e] = true;
            out.edge_gates[e] = Some(graph.select(b, pred)?);
        }
        out.pairs.push((i, j));
        out.soft.push(sample.soft);
    }
    Ok(out)
}

/// ROME-v2 topology: per node Gumbel-Top2 over in-edge logits.
pub fn sample_topology_v2(
    graph: &mut Graph,
    spec: &CellSpec,
    betas: &[Var],
    tau: f64,
    noise: &[GumbelNoise],
) -> Result<TopologySample> {
    check_nodes(spec, betas, noise)?;
    let mut out = TopologySample {
        mask: vec![false; spec.num_edges()],
        pairs: Vec::with_capacity(spec.num_intermediate),
        edge_gates: vec![None; spec.num_edges()],
        soft: Vec::with_capacity(spec.num_intermediate),
    };
    for n in 0..spec.num_intermediate {
        let k = spec.num_predecessors(n);
        if k < 2 {
            return Err(Error::contract(format!("node {n} has fewer than two predecessors")));
        }
        if graph.value(betas[n]).len() != k {
            return Err(Error::contract(format!(
                "node {n}: {} edge logits for {k} predecessors",
                graph.value(betas[n]).len()
            )));
        }
        let sample = gumbel::gumbel_top2(graph, betas[n], tau, &noise[n])?;
        let (a, b) = sample.indices;
        let (i, j) = (a.min(b), a.max(b));
        for pred in [i, j] {
            let e = spec.edge_index(n, pred);
            out.mask[e] = true;
            out.edge_gates[e] = Some(graph.select(sample.gate, pred)?);
        }
        out.pairs.push((i, j));
        out.soft.push(sample.soft);
    }
    Ok(out)
}

fn check_nodes(spec: &CellSpec, betas: &[Var], noise: &[GumbelNoise]) -> Result<()> {
    if betas.len() != spec.num_intermediate || noise.len() != spec.num_intermediate {
        return Err(Error::contract(format!(
            "{} topology vectors and {} noise vectors for {} nodes",
            betas.len(),
            noise.len(),
            spec.num_intermediate
        )));
    }
    Ok(())
}

/// Operation sample on one edge.
#[derive(Clone, Debug)]
pub struct OpSample {
    pub edge: usize,
    pub sample: CategoricalSample,
}

/// Independent Gumbel-Softmax operation samples on the given edges.
/// `alphas` and `noise` are indexed by edge over the whole cell.
pub fn sample_ops(
    graph: &mut Graph,
    alphas: &[Option<Var>],
    edges: &[usize],
    tau: f64,
    noise: &[GumbelNoise],
) -> Result<Vec<OpSample>> {
    if edges.is_empty() {
        return Err(Error::contract("sample_ops needs at least one edge"));
    }
    edges
        .iter()
        .map(|&edge| {
            let alpha = alphas
                .get(edge)
                .copied()
                .flatten()
                .ok_or_else(|| Error::contract(format!("no alpha bound for edge {edge}")))?;
            let noise = noise.get(edge).ok_or(Error::Index {
                index: edge,
                len: noise.len(),
            })?;
            Ok(OpSample {
                edge,
                sample: gumbel::gumbel_softmax(graph, alpha, tau, noise)?,
            })
        })
        .collect()
}

/// Graph handles of one sampled cell.
#[derive(Clone, Debug)]
pub struct CellGates {
    /// `None` for the dense baseline.
    pub topology: Option<TopologySample>,
    /// Per edge: the operation sample, for active edges.
    pub ops: Vec<Option<CategoricalSample>>,
}

impl CellGates {
    /// Straight-through scalar multiplying the output of `edge`.
    pub fn gate(&self, graph: &mut Graph, edge: usize, op: usize) -> Result<Var> {
        let sample = self.ops[edge]
            .as_ref()
            .ok_or_else(|| Error::contract(format!("edge {edge} has no operation sample")))?;
        let op_gate = graph.select(sample.gate, op)?;
        match self.topology.as_ref().and_then(|t| t.edge_gates[edge]) {
            Some(edge_gate) => graph.mul(edge_gate, op_gate),
            None => Ok(op_gate),
        }
    }
}

/// Where a sample came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub stream: u64,
    pub sample: usize,
}

/// One concrete single-path architecture. `gates` is `None` for fixed
/// architectures such as a trained genotype.
#[derive(Clone, Debug)]
pub struct SampledArchitecture {
    pub choice: ArchChoice,
    pub gates: Option<[CellGates; 2]>,
    pub provenance: Option<Provenance>,
}

impl SampledArchitecture {
    pub fn fixed(choice: ArchChoice) -> Self {
        SampledArchitecture {
            choice,
            gates: None,
            provenance: None,
        }
    }
}

/// Samples topology first, then operations on active edges, recording both on
/// `graph` with straight-through gates. `arch` must be a binder over
/// `params.tensors()`.
pub fn sample_architecture(
    graph: &mut Graph,
    arch: &mut Binder<'_>,
    params: &ArchParams,
    tau: f64,
    noise: &ArchNoise,
) -> Result<SampledArchitecture> {
    let spec = params.cell();
    let mut choices = Vec::with_capacity(2);
    let mut gates = Vec::with_capacity(2);
    for t in CellType::BOTH {
        let cell_noise = &noise.cells[t.index()];
        let topology = match params.topology() {
            CellTopology::Dense => None,
            kind => {
                let betas = (0..spec.num_intermediate)
                    .map(|n| arch.var(graph, params.topology_id(t, n).expect("topology id")))
                    .collect::<Result<Vec<_>>>()?;
                Some(if kind == CellTopology::Pairs {
                    sample_topology_v1(graph, spec, &betas, tau, &cell_noise.topology)?
                } else {
                    sample_topology_v2(graph, spec, &betas, tau, &cell_noise.topology)?
                })
            }
        };
        let selected = match &topology {
            Some(t) => t.mask.clone(),
            None => vec![true; spec.num_edges()],
        };
        let edges: Vec<usize> = (0..spec.num_edges()).filter(|&e| selected[e]).collect();
        let mut alphas = vec![None; spec.num_edges()];
        for &e in &edges {
            alphas[e] = Some(arch.var(graph, params.alpha_id(t, e))?);
        }
        let samples = sample_ops(graph, &alphas, &edges, tau, &cell_noise.ops)?;
        let mut ops = vec![None; spec.num_edges()];
        let mut op_gates = vec![None; spec.num_edges()];
        for s in samples {
            ops[s.edge] = Some(s.sample.index);
            op_gates[s.edge] = Some(s.sample);
        }
        choices.push(CellChoice { selected, ops });
        gates.push(CellGates {
            topology,
            ops: op_gates,
        });
    }
    let reduction = choices.pop().expect("two cells");
    let normal = choices.pop().expect("two cells");
    let g_red = gates.pop().expect("two cells");
    let g_norm = gates.pop().expect("two cells");
    Ok(SampledArchitecture {
        choice: ArchChoice {
            method: params.method(),
            cells: [normal, reduction],
        },
        gates: Some([g_norm, g_red]),
        provenance: None,
    })
}
