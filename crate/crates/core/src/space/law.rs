//! The factorized architecture law: topology probability times independent
//! per-edge operation probabilities.

use alloc::vec;
use alloc::vec::Vec;

use super::params::CellTopology;
use super::{ArchChoice, ArchParams, CellChoice, CellSpec, CellType};
use crate::tensor::numeric;
use crate::{Error, Result};

/// Probability that the unordered pair `{i, k}` is drawn when two categories
/// are taken without replacement from `p`.
pub fn pair_probability(p: &[f64], i: usize, k: usize) -> f64 {
    // 1 - p_i summed directly to avoid cancellation near p_i = 1
    let rest = |skip: usize| -> f64 {
        p.iter()
            .enumerate()
            .filter(|(m, _)| *m != skip)
            .map(|(_, x)| x)
            .sum()
    };
    p[i] * p[k] / rest(i) + p[k] * p[i] / rest(k)
}

/// Log-probability of one cell's choice under the parameters of cell type `t`.
pub fn cell_log_prob(params: &ArchParams, t: CellType, choice: &CellChoice) -> Result<f64> {
    let spec = params.cell();
    choice.validate(spec, params.topology())?;
    let mut total = 0.0;
    for n in 0..spec.num_intermediate {
        let preds = choice.predecessors(spec, n);
        match params.topology() {
            CellTopology::Dense => {}
            CellTopology::Pairs => {
                let beta = params.beta(t, n).expect("pair logits");
                let lp = numeric::log_softmax(beta.data());
                total += lp[spec.pair_index(n, (preds[0], preds[1]))];
            }
            CellTopology::Edges => {
                let beta = params.beta(t, n).expect("edge logits");
                let p = numeric::softmax(beta.data(), 1.0);
                total += libm::log(pair_probability(&p, preds[0], preds[1]));
            }
        }
    }
    for (edge, op) in choice.ops.iter().enumerate() {
        if let Some(op) = op {
            total += numeric::log_softmax(params.alpha(t, edge).data())[*op];
        }
    }
    if total.is_finite() {
        Ok(total)
    } else {
        Err(Error::NonFinite {
            op: "architecture_log_prob",
        })
    }
}

/// `log p(z; alpha, beta)` summed over both cell types.
pub fn architecture_log_prob(choice: &ArchChoice, params: &ArchParams) -> Result<f64> {
    if choice.method != params.method() {
        return Err(Error::contract("architecture and parameters use different methods"));
    }
    Ok(cell_log_prob(params, CellType::Normal, choice.cell(CellType::Normal))?
        + cell_log_prob(params, CellType::Reduction, choice.cell(CellType::Reduction))?)
}

/// Every admissible choice for one cell, in a deterministic order.
/// Intended for tiny cells: the count grows as pairs^N * ops^(2N).
pub fn enumerate_cell_choices(spec: &CellSpec, topology: CellTopology) -> Vec<CellChoice> {
    let masks: Vec<Vec<bool>> = match topology {
        CellTopology::Dense => vec![vec![true; spec.num_edges()]],
        _ => {
            let mut masks = vec![vec![false; spec.num_edges()]];
            for n in 0..spec.num_intermediate {
                let mut next = Vec::new();
                for m in &masks {
                    for (i, k) in spec.pairs(n) {
                        let mut m = m.clone();
                        m[spec.edge_index(n, i)] = true;
                        m[spec.edge_index(n, k)] = true;
                        next.push(m);
                    }
                }
                masks = next;
            }
            masks
        }
    };
    let mut out = Vec::new();
    for mask in masks {
        let active: Vec<usize> = (0..mask.len()).filter(|&e| mask[e]).collect();
        let combos = spec.num_ops().pow(active.len() as u32);
        for mut code in 0..combos {
            let mut ops = vec![None; mask.len()];
            for &e in &active {
                ops[e] = Some(code % spec.num_ops());
                code /= spec.num_ops();
            }
            out.push(CellChoice {
                selected: mask.clone(),
                ops,
            });
        }
    }
    out
}
