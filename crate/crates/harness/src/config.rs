//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rome_core::bilevel::{EvalConfig, SearchConfig};
use rome_core::data::DatasetSpec;
use rome_core::optim::OptimizerConfig;
use rome_core::space::{CellSpec, OpSetName, SearchMethod};
use serde::{Deserialize, Serialize};

/// Everything one search run needs. Missing keys take their defaults,
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: SearchMethod,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub theta_optimizer: OptimizerConfig,
    pub arch_optimizer: OptimizerConfig,
    pub tau_start: f64,
    pub tau_end: f64,
    pub seed: u64,
    /// `null` disables clipping.
    pub grad_clip: Option<f64>,
    pub num_cells: usize,
    pub num_intermediate: usize,
    /// Working width of normal cells.
    pub width: usize,
    pub op_set: OpSetName,
    pub dataset: DatasetSpec,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = SearchConfig::default();
        ExperimentConfig {
            method: s.method,
            k: s.k,
            epochs: s.epochs,
            batch_size: s.batch_size,
            theta_optimizer: s.theta_optimizer,
            arch_optimizer: s.arch_optimizer,
            tau_start: s.tau_start,
            tau_end: s.tau_end,
            seed: s.seed,
            grad_clip: s.grad_clip,
            num_cells: s.num_cells,
            num_intermediate: s.cell.num_intermediate,
            width: s.cell.feature_dim,
            op_set: OpSetName::S3,
            dataset: DatasetSpec::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cell(&self) -> CellSpec {
        CellSpec::new(self.num_intermediate, self.op_set.ops(), self.width)
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            method: self.method,
            k: self.k,
            epochs: self.epochs,
            batch_size: self.batch_size,
            theta_optimizer: self.theta_optimizer,
            arch_optimizer: self.arch_optimizer,
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            seed: self.seed,
            cell: self.cell(),
            num_cells: self.num_cells,
            grad_clip: self.grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let search = self.search_config();
        search.validate()?;
        self.dataset.validate()?;
        search
            .network(self.dataset.feature_dim, self.dataset.classes)
            .validate()?;
        self.eval.optimizer.validate()?;
        if self.eval.epochs == 0 || self.eval.batch_size == 0 {
            anyhow::bail!("eval.epochs and eval.batch_size must be at least 1");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        json_pretty(self)
    }
}

/// Pretty JSON with a trailing newline.
pub fn json_pretty<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}
