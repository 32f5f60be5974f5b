//! The single-path supernet: stem, stacked cells and classifier. Only the
//! operations chosen by a [`SampledArchitecture`] are evaluated, so
//! unselected operations never appear on the tape.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{CellLayout, NetworkSpec, OpKind, SampledArchitecture};
use crate::tensor::{Binder, Graph, Tensor, Var};
use crate::{Error, Result};

/// Features averaged together by the `avg` operation.
const AVG_GROUP: usize = 4;

#[derive(Clone, Debug, PartialEq)]
struct CellWeights {
    pre0: usize,
    pre1: usize,
    /// edge -> op slot -> parameter ids (empty for parameterless ops)
    ops: Vec<Vec<Vec<usize>>>,
}

/// Every trainable weight of the supernet, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct SupernetWeights {
    spec: NetworkSpec,
    tensors: Vec<Tensor>,
    stem: (usize, usize),
    cells: Vec<CellWeights>,
    classifier: (usize, usize),
}

/// Logits plus the number of candidate operations executed per cell.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub evaluated_ops: Vec<usize>,
}

impl SupernetWeights {
    /// He-uniform initialization for layers feeding a relu; the classifier
    /// uses `1/sqrt(fan_in)` bounds; biases start at zero.
    pub fn init<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut tensors = Vec::new();
        let mut push = |t: Tensor| {
            tensors.push(t);
            tensors.len() - 1
        };
        let mut uniform = |rows: usize, cols: usize, bound: f64| -> Result<Tensor> {
            let data = (0..rows * cols)
                .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
            Tensor::matrix(rows, cols, data)
        };
        let he = |fan_in: usize| libm::sqrt(6.0 / fan_in as f64);

        let d = spec.cell.feature_dim;
        let stem = (
            push(uniform(spec.input_dim, d, he(spec.input_dim))?),
            push(Tensor::zeros(&[d])),
        );
        let mut cells = Vec::with_capacity(spec.num_cells);
        for layout in spec.layouts() {
            let pre0 = push(uniform(layout.in0_dim, layout.state_dim, he(layout.in0_dim))?);
            let pre1 = push(uniform(layout.in1_dim, layout.state_dim, he(layout.in1_dim))?);
            let mut ops = Vec::with_capacity(spec.cell.num_edges());
            for e in 0..spec.cell.num_edges() {
                let (_, pred) = spec.cell.edge_endpoints(e);
                let (din, dout) = layout.edge_dims(pred);
                let mut slots = Vec::with_capacity(spec.cell.num_ops());
                for op in &spec.cell.op_set {
                    let ids = match op {
                        OpKind::LinSmall => vec![push(uniform(din, dout, he(din))?)],
                        OpKind::LinLarge => vec![
                            push(uniform(din, 2 * din, he(din))?),
                            push(uniform(2 * din, dout, he(2 * din))?),
                        ],
                        _ => Vec::new(),
                    };
                    slots.push(ids);
                }
                ops.push(slots);
            }
            cells.push(CellWeights { pre0, pre1, ops });
        }
        let cin = spec.classifier_in_dim();
        let classifier = (
            push(uniform(cin, spec.num_classes, 1.0 / libm::sqrt(cin as f64))?),
            push(Tensor::zeros(&[spec.num_classes])),
        );
        Ok(SupernetWeights {
            spec: spec.clone(),
            tensors,
            stem,
            cells,
            classifier,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Parameter ids owned by operation slot `op` on `edge` of cell `cell`.
    pub fn op_param_ids(&self, cell: usize, edge: usize, op: usize) -> &[usize] {
        &self.cells[cell].ops[edge][op]
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// `rows x cols` matrix averaging adjacent feature pairs (`cols = rows / 2`).
fn pool_matrix(rows: usize) -> Result<Tensor> {
    let cols = rows / 2;
    let mut m = Tensor::zeros(&[rows, cols]);
    for c in 0..cols {
        m.data_mut()[(2 * c) * cols + c] = 0.5;
        m.data_mut()[(2 * c + 1) * cols + c] = 0.5;
    }
    Ok(m)
}

/// Square matrix replacing every feature by the mean of its contiguous group.
fn group_mean_matrix(dim: usize) -> Tensor {
    let mut m = Tensor::zeros(&[dim, dim]);
    let mut start = 0;
    while start < dim {
        let end = (start + AVG_GROUP).min(dim);
        let w = 1.0 / (end - start) as f64;
        for i in start..end {
            for j in start..end {
                m.data_mut()[i * dim + j] = w;
            }
        }
        start = end;
    }
    m
}

fn matmul_const(graph: &mut Graph, x: Var, m: Tensor) -> Result<Var> {
    let m = graph.constant(m)?;
    graph.matmul(x, m)
}

struct OpContext<'a, 'b, R: ?Sized> {
    graph: &'a mut Graph,
    theta: &'a mut Binder<'b>,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> OpContext<'_, '_, R> {
    fn apply(&mut self, op: OpKind, x: Var, (din, dout): (usize, usize), ids: &[usize]) -> Result<Var> {
        let batch = self.graph.value(x).rows();
        let reduce = din != dout;
        let g = &mut *self.graph;
        match op {
            OpKind::Zero => g.constant(Tensor::zeros(&[batch, dout])),
            OpKind::Skip => {
                if reduce {
                    matmul_const(g, x, pool_matrix(din)?)
                } else {
                    Ok(x)
                }
            }
            OpKind::Avg => {
                let y = matmul_const(g, x, group_mean_matrix(din))?;
                if reduce {
                    matmul_const(g, y, pool_matrix(din)?)
                } else {
                    Ok(y)
                }
            }
            OpKind::Noise => {
                let y = if reduce {
                    matmul_const(g, x, pool_matrix(din)?)?
                } else {
                    x
                };
                let noise: Vec<f64> = (0..batch * dout)
                    .map(|_| self.rng.sample(StandardNormal))
                    .collect();
                let n = self.graph.constant(Tensor::matrix(batch, dout, noise)?)?;
                self.graph.add(y, n)
            }
            OpKind::LinSmall => {
                let w = self.theta.var(self.graph, ids[0])?;
                let h = self.graph.matmul(x, w)?;
                self.graph.relu(h)
            }
            OpKind::LinLarge => {
                let w1 = self.theta.var(self.graph, ids[0])?;
                let w2 = self.theta.var(self.graph, ids[1])?;
                let h = self.graph.matmul(x, w1)?;
                let h = self.graph.relu(h)?;
                let h = self.graph.matmul(h, w2)?;
                self.graph.relu(h)
            }
        }
    }
}

/// Added to the row variance before normalizing.
const NORM_EPS: f64 = 1e-5;

/// Standardizes every row to zero mean and unit variance, with no learned
/// scale or shift. Built from tape primitives so it needs no backward rule
/// of its own.
pub(crate) fn row_normalize(graph: &mut Graph, x: Var) -> Result<Var> {
    let (rows, d) = (graph.value(x).rows(), graph.value(x).cols());
    let mut center = Tensor::identity(d);
    center.data_mut().iter_mut().for_each(|v| *v -= 1.0 / d as f64);
    let xc = matmul_const(graph, x, center)?;
    let sq = graph.mul(xc, xc)?;
    let var = matmul_const(graph, sq, Tensor::filled(&[d, 1], 1.0 / d as f64))?;
    let eps = graph.constant(Tensor::filled(&[rows, 1], NORM_EPS))?;
    let var = graph.add(var, eps)?;
    let log_var = graph.log(var)?;
    let half = graph.scale(log_var, -0.5)?;
    let inv_std = graph.exp(half)?;
    let inv_std = matmul_const(graph, inv_std, Tensor::filled(&[1, d], 1.0))?;
    graph.mul(xc, inv_std)
}

fn linear_bias(graph: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let rows = graph.value(x).rows();
    let h = graph.matmul(x, w)?;
    let b = graph.expand_rows(b, rows)?;
    graph.add(h, b)
}

/// Single-path forward pass.
///
/// Each intermediate node sums the gated outputs of its active in-edges; only
/// the one sampled operation of an active edge runs. With gates present, every
/// edge output is multiplied by its straight-through scalar, whose forward
/// value is exactly 1. `theta` must bind `weights.tensors()`; `rng` feeds the
/// `noise` operation.
pub fn forward_single_path<R: Rng + ?Sized>(
    graph: &mut Graph,
    weights: &SupernetWeights,
    theta: &mut Binder<'_>,
    arch: &SampledArchitecture,
    input: &Tensor,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let spec = &weights.spec;
    let cell = &spec.cell;
    arch.choice.validate(cell)?;
    if input.rank() != 2 || input.cols() != spec.input_dim {
        return Err(Error::Shape {
            op: "forward",
            lhs: input.shape().to_vec(),
            rhs: vec![spec.input_dim],
        });
    }
    let x = graph.constant(input.clone())?;
    let (sw, sb) = (theta.var(graph, weights.stem.0)?, theta.var(graph, weights.stem.1)?);
    let stem = linear_bias(graph, x, sw, sb)?;
    let stem = row_normalize(graph, stem)?;

    let layouts: Vec<CellLayout> = spec.layouts();
    let mut prev2 = stem;
    let mut prev1 = stem;
    let mut evaluated_ops = Vec::with_capacity(layouts.len());
    let mut ctx = OpContext { graph, theta, rng };
    for (c, layout) in layouts.iter().enumerate() {
        let t = layout.cell_type;
        let choice = arch.choice.cell(t);
        let gates = arch.gates.as_ref().map(|g| &g[t.index()]);
        let cw = &weights.cells[c];

        let mut states = Vec::with_capacity(cell.num_intermediate + 2);
        for (input, id) in [(prev2, cw.pre0), (prev1, cw.pre1)] {
            let w = ctx.theta.var(ctx.graph, id)?;
            let r = ctx.graph.relu(input)?;
            let h = ctx.graph.matmul(r, w)?;
            states.push(row_normalize(ctx.graph, h)?);
        }
        let mut evaluated = 0;
        for n in 0..cell.num_intermediate {
            let mut node: Option<Var> = None;
            for pred in 0..cell.num_predecessors(n) {
                let e = cell.edge_index(n, pred);
                if !choice.selected[e] {
                    continue;
                }
                let op = choice.ops[e].expect("validated choice");
                let mut out = ctx.apply(cell.op_set[op], states[pred], layout.edge_dims(pred), &cw.ops[e][op])?;
                evaluated += 1;
                if let Some(gates) = gates {
                    let gate = gates.gate(ctx.graph, e, op)?;
                    let shape = ctx.graph.value(out).shape().to_vec();
                    let gate = ctx.graph.expand(gate, &shape)?;
                    out = ctx.graph.mul(out, gate)?;
                }
                node = Some(match node {
                    Some(acc) => ctx.graph.add(acc, out)?,
                    None => out,
                });
            }
            let node = node.ok_or_else(|| {
                Error::contract(format!("cell {c} node {n} has no active in-edge"))
            })?;
            states.push(node);
        }
        evaluated_ops.push(evaluated);
        prev2 = prev1;
        prev1 = ctx.graph.concat_cols(&states[2..])?;
    }
    let (cw, cb) = (
        ctx.theta.var(ctx.graph, weights.classifier.0)?,
        ctx.theta.var(ctx.graph, weights.classifier.1)?,
    );
    let logits = linear_bias(ctx.graph, prev1, cw, cb)?;
    Ok(ForwardOutput {
        logits,
        evaluated_ops,
    })
}
