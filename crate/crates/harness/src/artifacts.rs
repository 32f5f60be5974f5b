//! Run directories.
//!
//! A run directory holds everything needed to reproduce and inspect a search:
//!
//! | file | contents |
//! |---|---|
//! | `config.json` | the exact [`ExperimentConfig`], seed included |
//! | `meta.json` | seed, library version, flags |
//! | `genotype.json` | derived architecture |
//! | `genotype.normal.dot`, `genotype.reduction.dot` | Graphviz per cell type |
//! | `arch_params.json` | final architecture parameters |
//! | `trace.csv` | one row per epoch |
//! | `report.json` | final search metrics, plus retraining results after `eval` |
//!
//! Nothing written here depends on wall-clock time, so repeated runs produce
//! identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rome_core::bilevel::{EvalReport, SearchOutcome};
use rome_core::space::{collapse_metrics, ArchParams, CellType, Genotype, OpKind, SearchMethod};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{json_pretty, ExperimentConfig};
use crate::dot::genotype_to_dot;

pub const CONFIG: &str = "config.json";
pub const META: &str = "meta.json";
pub const GENOTYPE: &str = "genotype.json";
pub const ARCH_PARAMS: &str = "arch_params.json";
pub const TRACE: &str = "trace.csv";
pub const REPORT: &str = "report.json";

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub seed: u64,
    pub version: String,
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub parameterless_fraction: f64,
    pub skip_count: usize,
    pub op_counts: Vec<(OpKind, usize)>,
    /// Mean op probability over edges, in op-set order.
    pub op_prob_means: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub method: SearchMethod,
    pub seed: u64,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub final_tau: f64,
    pub normal: CellSummary,
    pub reduction: CellSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub search: SearchReport,
    /// Filled in by `eval`.
    pub eval: Option<EvalReport>,
}

fn cell_summary(genotype: &Genotype, params: &ArchParams, t: CellType) -> Result<CellSummary> {
    let cell = genotype
        .cell(t)
        .with_context(|| format!("genotype has no {} cell", t.name()))?;
    let m = collapse_metrics(cell, &params.cell().op_set);
    Ok(CellSummary {
        parameterless_fraction: m.parameterless_fraction,
        skip_count: m.skip_count,
        op_counts: m.histogram,
        op_prob_means: params.op_prob_means(t),
    })
}

impl SearchReport {
    pub fn new(cfg: &ExperimentConfig, out: &SearchOutcome) -> Result<Self> {
        let last = out.trace.records.last().context("search produced no epochs")?;
        Ok(SearchReport {
            method: cfg.method,
            seed: cfg.seed,
            epochs: cfg.epochs,
            final_train_loss: last.train_loss,
            final_val_loss: last.val_loss,
            final_tau: last.tau,
            normal: cell_summary(&out.genotype, &out.params, CellType::Normal)?,
            reduction: cell_summary(&out.genotype, &out.params, CellType::Reduction)?,
        })
    }
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes `genotype.json` and one DOT file per cell type next to it.
pub fn write_genotype(dir: &Path, genotype: &Genotype) -> Result<()> {
    write(&dir.join(GENOTYPE), &json_pretty(genotype))?;
    write_dot(dir, "genotype", genotype)
}

/// Writes one `<stem>.<cell type>.dot` file per cell.
pub fn write_dot(dir: &Path, stem: &str, genotype: &Genotype) -> Result<()> {
    for (kind, dot) in genotype_to_dot(genotype) {
        write(&dir.join(format!("{stem}.{kind}.dot")), &dot)?;
    }
    Ok(())
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.join(CONFIG).is_file() {
            anyhow::bail!("{} is not a run directory (no {CONFIG})", path.display());
        }
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_search(
        &self,
        cfg: &ExperimentConfig,
        meta: &RunMeta,
        out: &SearchOutcome,
    ) -> Result<RunReport> {
        write(&self.file(CONFIG), &cfg.to_json())?;
        write(&self.file(META), &json_pretty(meta))?;
        write_genotype(&self.path, &out.genotype)?;
        write(&self.file(ARCH_PARAMS), &json_pretty(&out.params))?;
        write(&self.file(TRACE), &out.trace.to_csv())?;
        let report = RunReport {
            search: SearchReport::new(cfg, out)?,
            eval: None,
        };
        write(&self.file(REPORT), &json_pretty(&report))?;
        Ok(report)
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.file(CONFIG))
    }

    pub fn genotype(&self) -> Result<Genotype> {
        read_json(&self.file(GENOTYPE))
    }

    pub fn arch_params(&self) -> Result<ArchParams> {
        let p: ArchParams = read_json(&self.file(ARCH_PARAMS))?;
        p.validate()?;
        Ok(p)
    }

    pub fn report(&self) -> Result<RunReport> {
        read_json(&self.file(REPORT))
    }

    pub fn write_report(&self, report: &RunReport) -> Result<()> {
        write(&self.file(REPORT), &json_pretty(report))
    }
}
