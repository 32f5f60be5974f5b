//! Graphviz export of derived cells.

use std::fmt::Write;

use rome_core::space::{CellGenotype, Genotype};

fn state_name(pred: usize) -> String {
    match pred {
        0 => "c_{k-2}".to_string(),
        1 => "c_{k-1}".to_string(),
        n => (n - 2).to_string(),
    }
}

/// One `digraph` per cell. Every node's two in-edges carry the operation as
/// their label; the edges into the output node are unlabeled.
pub fn cell_to_dot(cell: &CellGenotype) -> String {
    let mut s = String::new();
    let name = cell.cell_type.name();
    let n = cell.nodes.len();
    writeln!(s, "digraph {name} {{").unwrap();
    writeln!(s, "  rankdir=LR;").unwrap();
    writeln!(s, "  node [shape=box, style=filled, fillcolor=lightblue];").unwrap();
    writeln!(s, "  \"c_{{k-2}}\" [fillcolor=darkseagreen2];").unwrap();
    writeln!(s, "  \"c_{{k-1}}\" [fillcolor=darkseagreen2];").unwrap();
    for i in 0..n {
        writeln!(s, "  \"{i}\";").unwrap();
    }
    writeln!(s, "  \"c_{{k}}\" [fillcolor=palegoldenrod];").unwrap();
    for (i, edges) in cell.nodes.iter().enumerate() {
        for (pred, op) in edges {
            writeln!(s, "  \"{}\" -> \"{i}\" [label=\"{}\"];", state_name(*pred), op.name()).unwrap();
        }
    }
    for i in 0..n {
        writeln!(s, "  \"{i}\" -> \"c_{{k}}\";").unwrap();
    }
    s.push_str("}\n");
    s
}

/// `(file stem suffix, dot source)` per cell type, e.g. `("normal", ...)`.
pub fn genotype_to_dot(g: &Genotype) -> Vec<(&'static str, String)> {
    g.cells
        .iter()
        .map(|c| (c.cell_type.name(), cell_to_dot(c)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rome_core::space::{CellType, OpKind};

    #[test]
    fn labels_every_input_edge() {
        let cell = CellGenotype {
            cell_type: CellType::Reduction,
            nodes: vec![
                [(0, OpKind::Skip), (1, OpKind::LinSmall)],
                [(1, OpKind::Zero), (2, OpKind::Avg)],
            ],
        };
        let dot = cell_to_dot(&cell);
        assert!(dot.starts_with("digraph reduction {"));
        assert_eq!(dot.matches("[label=").count(), 4);
        assert!(dot.contains("\"c_{k-1}\" -> \"1\" [label=\"zero\"];"));
        assert!(dot.contains("\"0\" -> \"1\" [label=\"avg\"];"));
        assert_eq!(dot.matches("-> \"c_{k}\"").count(), 2);
    }
}
