//! The `rome` command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use rome_core::bilevel::{run_search, train_genotype, EvalConfig};
use rome_core::data::make_dataset;
use rome_core::gumbel::top2_marginal_closed_form;
use rome_core::rng::{rng_at, streams, Rng};
use rome_core::space::{derive_genotype, ArchParams, Genotype, SearchMethod, SupernetWeights};
use rome_core::stats::{
    collapse_trial, k_averaged_gradient, test_gumbel_max, test_gumbel_top2_equivalence,
    variance_report, CollapseReport, VarianceReport, VarianceSnapshot, MAX_ENUMERABLE,
};
use rome_core::tensor::numeric;
use serde::Serialize;

use crate::artifacts::{self, read_json, write, write_dot, RunDir, RunMeta, GENOTYPE, VERSION};
use crate::config::{json_pretty, ExperimentConfig};

/// Stream for `verify-gumbel`; vector `v` uses counter `v`.
const VERIFY_STREAM: u64 = streams::STUDY | (1 << 40);

#[derive(Debug, Parser)]
#[command(name = "rome", version, about = "Single-path architecture search with disentangled topology sampling")]
pub struct Cli {
    /// Overrides the seed of the config or study.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for seed- and replicate-level parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Recorded in run metadata. Every reduction already runs in a fixed
    /// order, so results never depend on the thread count.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a search and write a run directory.
    Search {
        config: PathBuf,
        /// Run directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-derive genotype.json from a run's saved architecture parameters.
    Derive { run_dir: PathBuf },
    /// Retrain a run's genotype from scratch and report accuracies.
    Eval { run_dir: PathBuf },
    /// Gumbel-Top2 and Gumbel-Max draws against their exact laws.
    VerifyGumbel {
        /// Categories per logit vector.
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 1_000_000)]
        draws: u64,
        /// Number of random logit vectors.
        #[arg(long, default_value_t = 1)]
        vectors: usize,
        /// Total-variation threshold.
        #[arg(long, default_value_t = 0.01)]
        tv: f64,
    },
    /// Variance of K-averaged architecture gradients at frozen parameters.
    VarianceStudy {
        /// Experiment config for the snapshot; defaults apply without one.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
        k_list: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search and retrain per seed and method, then compare collapse.
    CollapseStudy {
        config: PathBuf,
        /// Comma list (`0,1,2`) or half-open range (`0..5`).
        #[arg(long, value_parser = parse_seeds)]
        seeds: SeedList,
        #[arg(long, value_delimiter = ',', default_values_t = [SearchMethod::RomeV2, SearchMethod::GdasBaseline])]
        methods: Vec<SearchMethod>,
        /// Report path; defaults to collapse.json in the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one DOT file per cell type of a genotype.
    ExportDot {
        genotype: PathBuf,
        /// Output directory; defaults to the genotype's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

fn parse_seeds(s: &str) -> Result<SeedList, String> {
    seed_list(s).map(SeedList)
}

fn seed_list(s: &str) -> Result<Vec<u64>, String> {
    let bad = |e: std::num::ParseIntError| format!("invalid seed list {s:?}: {e}");
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        if a >= b {
            return Err(format!("empty seed range {s:?}"));
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(bad)).collect()
}

/// Whether every check a command ran passed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Search { ref config, ref out } => search(&cli, config, out.as_deref()),
        Command::Derive { ref run_dir } => derive(run_dir),
        Command::Eval { ref run_dir } => eval(&cli, run_dir),
        Command::VerifyGumbel {
            n,
            draws,
            vectors,
            tv,
        } => verify_gumbel(cli.seed.unwrap_or(0), n, draws, vectors, tv),
        Command::VarianceStudy {
            ref config,
            ref k_list,
            replicates,
            ref out,
        } => variance_study(&cli, config.as_deref(), k_list, replicates, out.as_deref()),
        Command::CollapseStudy {
            ref config,
            ref seeds,
            ref methods,
            ref out,
        } => collapse(config, &seeds.0, methods, out.as_deref()),
        Command::ExportDot { ref genotype, ref out } => export_dot(genotype, out.as_deref()),
    }
}

fn load_config(cli: &Cli, path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn search(cli: &Cli, config: &Path, out: Option<&Path>) -> Result<Outcome> {
    let cfg = load_config(cli, config)?;
    let dir = RunDir::create(out.unwrap_or(&cfg.output_dir))?;
    let data = make_dataset(&cfg.dataset)?;
    let outcome = run_search(&cfg.search_config(), &data)?;
    let meta = RunMeta {
        seed: cfg.seed,
        version: VERSION.to_string(),
        deterministic: cli.deterministic,
    };
    let report = dir.write_search(&cfg, &meta, &outcome)?;
    let s = &report.search;
    println!(
        "{} seed {}: {} epochs, train loss {:.4}, val loss {:.4}",
        s.method, s.seed, s.epochs, s.final_train_loss, s.final_val_loss
    );
    println!(
        "normal cell: parameterless {:.3}, skip {}",
        s.normal.parameterless_fraction, s.normal.skip_count
    );
    println!("wrote {}", dir.path.display());
    Ok(Outcome::Pass)
}

fn derive(run_dir: &Path) -> Result<Outcome> {
    let dir = RunDir::open(run_dir)?;
    let params = dir.arch_params()?;
    let genotype = derive_genotype(&params);
    let previous: Option<Genotype> = dir.genotype().ok();
    artifacts::write_genotype(&dir.path, &genotype)?;
    match previous {
        Some(p) if p == genotype => println!("genotype unchanged"),
        Some(_) => println!("genotype updated"),
        None => println!("genotype written"),
    }
    Ok(Outcome::Pass)
}

fn eval(cli: &Cli, run_dir: &Path) -> Result<Outcome> {
    let dir = RunDir::open(run_dir)?;
    let cfg = dir.config()?;
    let genotype = dir.genotype()?;
    let data = make_dataset(&cfg.dataset)?;
    let eval_cfg = EvalConfig {
        seed: cli.seed.unwrap_or(cfg.eval.seed),
        ..cfg.eval.clone()
    };
    let report = train_genotype(&genotype, &cfg.cell(), cfg.num_cells, &data, &eval_cfg)?;
    println!(
        "accuracy: train {:.4}, val {:.4}, test {:.4}",
        report.train_accuracy, report.val_accuracy, report.test_accuracy
    );
    let mut run = dir.report()?;
    run.eval = Some(report);
    dir.write_report(&run)?;
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct GumbelCheck {
    logits: Vec<f64>,
    top2_tv: f64,
    top2_chi_square: f64,
    top2_max_marginal_error: f64,
    max_tv: f64,
}

fn verify_gumbel(seed: u64, n: usize, draws: u64, vectors: usize, tv: f64) -> Result<Outcome> {
    if !(2..=MAX_ENUMERABLE).contains(&n) {
        bail!("--n must be between 2 and {MAX_ENUMERABLE}");
    }
    let checks = (0..vectors as u64)
        .into_par_iter()
        .map(|v| {
            let mut rng = rng_at(seed, VERIFY_STREAM, v);
            let logits: Vec<f64> = (0..n).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
            let top2 = test_gumbel_top2_equivalence(&logits, draws, &mut rng)?;
            let max = test_gumbel_max(&logits, draws, &mut rng)?;
            let p = numeric::softmax(&logits, 1.0);
            let mut worst = 0.0f64;
            for j in 0..n {
                let empirical: u64 = top2
                    .support
                    .iter()
                    .zip(&top2.counts)
                    .filter(|(s, _)| s.trim_matches(['{', '}']).split(',').any(|x| x == j.to_string()))
                    .map(|(_, c)| *c)
                    .sum();
                let closed = top2_marginal_closed_form(&p, j)?;
                worst = worst.max((empirical as f64 / draws as f64 - closed).abs());
            }
            Ok(GumbelCheck {
                logits,
                top2_tv: top2.total_variation,
                top2_chi_square: top2.chi_square,
                top2_max_marginal_error: worst,
                max_tv: max.total_variation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ok = true;
    println!("{:>6} {:>10} {:>12} {:>14} {:>10}", "vector", "top2 TV", "chi-square", "marginal err", "max TV");
    for (v, c) in checks.iter().enumerate() {
        let pass = c.top2_tv < tv && c.max_tv < tv && c.top2_max_marginal_error < 1e-2;
        ok &= pass;
        println!(
            "{v:>6} {:>10.5} {:>12.2} {:>14.5} {:>10.5} {}",
            c.top2_tv,
            c.top2_chi_square,
            c.top2_max_marginal_error,
            c.max_tv,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok { Outcome::Pass } else { Outcome::Fail })
}

/// Frozen state for the variance study: freshly initialized parameters and
/// the first validation batch.
pub fn variance_snapshot(cfg: &ExperimentConfig) -> Result<VarianceSnapshot> {
    let data = make_dataset(&cfg.dataset)?;
    let search = cfg.search_config();
    let spec = search.network(data.train.feature_dim(), data.train.classes);
    let params = ArchParams::init(cfg.method, cfg.cell(), &mut rng_at(cfg.seed, streams::INIT, 0))?;
    let weights = SupernetWeights::init(&spec, &mut rng_at(cfg.seed, streams::INIT, 1))?;
    let rows: Vec<usize> = (0..cfg.batch_size.min(data.val.len())).collect();
    let (x, y) = data.val.batch(&rows)?;
    Ok(VarianceSnapshot {
        params,
        weights,
        x,
        y,
        tau: cfg.tau_start,
    })
}

/// Replicates in parallel; results are collected in replicate order.
pub fn parallel_variance_study(
    snap: &VarianceSnapshot,
    k_values: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<VarianceReport> {
    let samples = k_values
        .iter()
        .map(|&k| {
            (0..replicates as u64)
                .into_par_iter()
                .map(|r| k_averaged_gradient(snap, k, seed, r))
                .collect::<rome_core::Result<Vec<_>>>()
        })
        .collect::<rome_core::Result<Vec<_>>>()?;
    Ok(variance_report(k_values, &samples)?)
}

/// Largest |z| between a K-mean and the K = 1 mean that still counts as
/// unbiased, Bonferroni-style over a few hundred parameters.
pub const MAX_MEAN_Z: f64 = 5.0;

/// Whether each K's variance ratio is within 30% of 1/K and its mean agrees
/// with K = 1.
pub fn variance_checks(report: &VarianceReport) -> Vec<bool> {
    report
        .k_values
        .iter()
        .zip(report.ratios.iter().zip(&report.max_mean_z))
        .map(|(&k, (&r, &z))| {
            let target = 1.0 / k as f64;
            (0.7 * target..=1.3 * target).contains(&r) && z < MAX_MEAN_Z
        })
        .collect()
}

fn variance_study(
    cli: &Cli,
    config: Option<&Path>,
    k_list: &[usize],
    replicates: usize,
    out: Option<&Path>,
) -> Result<Outcome> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let mut ks = vec![1];
    ks.extend(k_list.iter().copied().filter(|&k| k != 1));
    if ks.contains(&0) {
        bail!("K values must be positive");
    }
    let snap = variance_snapshot(&cfg)?;
    let report = parallel_variance_study(&snap, &ks, replicates, cfg.seed)?;
    let checks = variance_checks(&report);
    println!("{:>4} {:>14} {:>8} {:>8} {:>10}", "K", "variance", "ratio", "1/K", "max |z|");
    for (i, &k) in report.k_values.iter().enumerate() {
        println!(
            "{k:>4} {:>14.6e} {:>8.4} {:>8.4} {:>10.3} {}",
            report.aggregate[i],
            report.ratios[i],
            1.0 / k as f64,
            report.max_mean_z[i],
            if checks[i] { "ok" } else { "FAIL" }
        );
    }
    if let Some(path) = out {
        write(path, &json_pretty(&report))?;
    }
    Ok(if checks.iter().all(|c| *c) { Outcome::Pass } else { Outcome::Fail })
}

/// Runs every `(seed, method)` pair in parallel.
pub fn parallel_collapse_study(
    cfg: &ExperimentConfig,
    methods: &[SearchMethod],
    seeds: &[u64],
) -> Result<CollapseReport> {
    let data = make_dataset(&cfg.dataset)?;
    let base = cfg.search_config();
    let jobs: Vec<(u64, SearchMethod)> = seeds
        .iter()
        .flat_map(|&s| methods.iter().map(move |&m| (s, m)))
        .collect();
    let trials = jobs
        .par_iter()
        .map(|&(seed, m)| collapse_trial(&base, m, seed, &data, &cfg.eval))
        .collect::<rome_core::Result<Vec<_>>>()?;
    Ok(CollapseReport::from_trials(trials))
}

/// `Some(true)` when ROME-v2 collapses no more than the baseline and its
/// genotypes validate at least as well; `None` without both methods.
pub fn collapse_direction(report: &CollapseReport) -> Option<bool> {
    let rome = report.summary(SearchMethod::RomeV2)?;
    let base = report.summary(SearchMethod::GdasBaseline)?;
    Some(
        rome.mean_parameterless_fraction <= base.mean_parameterless_fraction
            && rome.mean_val_accuracy >= base.mean_val_accuracy,
    )
}

fn collapse(config: &Path, seeds: &[u64], methods: &[SearchMethod], out: Option<&Path>) -> Result<Outcome> {
    let cfg = ExperimentConfig::load(config)?;
    if seeds.is_empty() || methods.is_empty() {
        bail!("collapse-study needs at least one seed and one method");
    }
    let report = parallel_collapse_study(&cfg, methods, seeds)?;
    println!("{:>6} {:>14} {:>14} {:>6} {:>8} {:>8}", "seed", "method", "parameterless", "skip", "val", "test");
    for t in &report.trials {
        println!(
            "{:>6} {:>14} {:>14.3} {:>6} {:>8.4} {:>8.4}",
            t.seed, t.method.name(), t.parameterless_fraction, t.skip_count, t.val_accuracy, t.test_accuracy
        );
    }
    for s in &report.summaries {
        println!(
            "{:>6} {:>14} {:>14.3} {:>6.2} {:>8.4} {:>8.4}",
            "mean", s.method.name(), s.mean_parameterless_fraction, s.mean_skip_count, s.mean_val_accuracy, s.mean_test_accuracy
        );
    }
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => {
            std::fs::create_dir_all(&cfg.output_dir)
                .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
            cfg.output_dir.join("collapse.json")
        }
    };
    write(&path, &json_pretty(&report))?;
    println!("wrote {}", path.display());
    match collapse_direction(&report) {
        Some(true) => println!("rome_v2 collapses no more than gdas_baseline and validates at least as well"),
        Some(false) => {
            println!("rome_v2 does not beat gdas_baseline on both collapse and validation accuracy");
            return Ok(Outcome::Fail);
        }
        None => {}
    }
    Ok(Outcome::Pass)
}

fn export_dot(path: &Path, out: Option<&Path>) -> Result<Outcome> {
    let genotype: Genotype = read_json(path)?;
    for c in &genotype.cells {
        for (i, [(a, _), (b, _)]) in c.nodes.iter().enumerate() {
            if a == b || *a.max(b) >= i + 2 {
                bail!("{} node {i} has invalid predecessors {a}, {b}", c.cell_type.name());
            }
        }
    }
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(GENOTYPE.trim_end_matches(".json"));
    write_dot(&dir, stem, &genotype)?;
    for c in &genotype.cells {
        println!("{}", dir.join(format!("{stem}.{}.dot", c.cell_type.name())).display());
    }
    Ok(Outcome::Pass)
}
