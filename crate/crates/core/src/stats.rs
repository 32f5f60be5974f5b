//! Verification oracles: exact enumeration of small sampling processes,
//! Monte Carlo distribution tests, the gradient-variance study and the
//! collapse comparison.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bilevel::{run_search, sample_gradient, train_genotype, EvalConfig, SearchConfig, Wrt};
use crate::data::Splits;
use crate::gumbel::{gumbel_max, gumbel_top2_hard, sample_gumbel, validate_simplex};
use crate::rng::{rng_at, streams, Rng};
use crate::space::{
    cell_log_prob, choose_hard, collapse_metrics, enumerate_cell_choices, ArchNoise, ArchParams,
    CellType, SearchMethod, SupernetWeights,
};
use crate::tensor::{numeric, Tensor};
use crate::{Error, Result};

/// Exact law of an unordered pair drawn without replacement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDistribution {
    /// Lexicographic `(i, k)` with `i < k`.
    pub pairs: Vec<(usize, usize)>,
    pub probs: Vec<f64>,
}

impl PairDistribution {
    pub fn index_of(&self, pair: (usize, usize)) -> Option<usize> {
        let key = (pair.0.min(pair.1), pair.0.max(pair.1));
        self.pairs.iter().position(|p| *p == key)
    }

    /// Probability that category `j` is in the pair.
    pub fn marginal(&self, j: usize) -> f64 {
        self.pairs
            .iter()
            .zip(&self.probs)
            .filter(|((a, b), _)| *a == j || *b == j)
            .map(|(_, p)| p)
            .sum()
    }
}

/// Walks both ordered draws of the sequential process (first from `p`, then
/// from `p` renormalized without the first) and folds them into unordered
/// pairs.
pub fn enumerate_without_replacement(p: &[f64]) -> Result<PairDistribution> {
    validate_simplex(p)?;
    let n = p.len();
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for k in i + 1..n {
            pairs.push((i, k));
        }
    }
    let mut probs = vec![0.0; pairs.len()];
    for first in 0..n {
        let rest: f64 = (0..n).filter(|&m| m != first).map(|m| p[m]).sum();
        for second in (0..n).filter(|&m| m != first) {
            let idx = pairs
                .iter()
                .position(|&(a, b)| a == first.min(second) && b == first.max(second))
                .expect("pair exists");
            probs[idx] += p[first] * p[second] / rest;
        }
    }
    Ok(PairDistribution { pairs, probs })
}

/// Empirical counts against an expected law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionTestResult {
    pub support: Vec<String>,
    pub expected: Vec<f64>,
    pub counts: Vec<u64>,
    pub draws: u64,
    pub total_variation: f64,
    pub chi_square: f64,
    pub dof: usize,
}

impl DistributionTestResult {
    pub fn from_counts(support: Vec<String>, expected: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        if support.len() != expected.len() || counts.len() != expected.len() {
            return Err(Error::contract("support, expected and counts differ in length"));
        }
        let total: f64 = expected.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain {
                op: "distribution_test",
                detail: format!("expected probabilities sum to {total}"),
            });
        }
        let draws: u64 = counts.iter().sum();
        if draws == 0 {
            return Err(Error::contract("no draws"));
        }
        let nf = draws as f64;
        let mut tv = 0.0;
        let mut chi = 0.0;
        let mut cells = 0;
        for (&p, &c) in expected.iter().zip(&counts) {
            tv += (c as f64 / nf - p).abs();
            if p > 0.0 {
                let e = nf * p;
                chi += (c as f64 - e) * (c as f64 - e) / e;
                cells += 1;
            }
        }
        Ok(DistributionTestResult {
            support,
            expected,
            counts,
            draws,
            total_variation: 0.5 * tv,
            chi_square: chi,
            dof: cells.max(1) - 1,
        })
    }

    pub fn passes(&self, tv_threshold: f64) -> bool {
        self.total_variation < tv_threshold
    }
}

/// Largest category count handled by [`test_gumbel_top2_equivalence`].
pub const MAX_ENUMERABLE: usize = 8;

/// Hard Gumbel-Top2 draws on `beta` against the enumerated without-replacement
/// law of `softmax(beta)`.
pub fn test_gumbel_top2_equivalence<R: Rng + ?Sized>(
    beta: &[f64],
    draws: u64,
    rng: &mut R,
) -> Result<DistributionTestResult> {
    if beta.len() > MAX_ENUMERABLE {
        return Err(Error::contract(format!(
            "at most {MAX_ENUMERABLE} categories can be enumerated"
        )));
    }
    let law = enumerate_without_replacement(&numeric::softmax(beta, 1.0))?;
    let mut counts = vec![0u64; law.pairs.len()];
    for _ in 0..draws {
        let noise = sample_gumbel(beta.len(), rng);
        let pair = gumbel_top2_hard(beta, &noise)?;
        counts[law.index_of(pair).expect("pair in support")] += 1;
    }
    let support = law.pairs.iter().map(|(i, k)| format!("{{{i},{k}}}")).collect();
    DistributionTestResult::from_counts(support, law.probs, counts)
}

/// Gumbel-Max argmax frequencies against `softmax(logits)`.
pub fn test_gumbel_max<R: Rng + ?Sized>(
    logits: &[f64],
    draws: u64,
    rng: &mut R,
) -> Result<DistributionTestResult> {
    let logp = numeric::log_softmax(logits);
    let mut counts = vec![0u64; logits.len()];
    for _ in 0..draws {
        let noise = sample_gumbel(logits.len(), rng);
        counts[gumbel_max(&logp, &noise)?] += 1;
    }
    let support = (0..logits.len()).map(|i| format!("{i}")).collect();
    DistributionTestResult::from_counts(support, numeric::softmax(logits, 1.0), counts)
}

/// Hard architecture draws for one cell type against the enumerated law.
pub fn test_cell_law<R: Rng + ?Sized>(
    params: &ArchParams,
    t: CellType,
    draws: u64,
    rng: &mut R,
) -> Result<DistributionTestResult> {
    let choices = enumerate_cell_choices(params.cell(), params.topology());
    let index: BTreeMap<_, usize> = choices.iter().cloned().zip(0..).collect();
    let expected = choices
        .iter()
        .map(|c| cell_log_prob(params, t, c).map(libm::exp))
        .collect::<Result<Vec<f64>>>()?;
    let mut counts = vec![0u64; choices.len()];
    for _ in 0..draws {
        let noise = ArchNoise::draw(params, rng);
        let choice = choose_hard(params, &noise)?;
        let idx = index
            .get(choice.cell(t))
            .ok_or_else(|| Error::contract("sampled a choice outside the enumeration"))?;
        counts[*idx] += 1;
    }
    let support = (0..choices.len()).map(|i| format!("arch{i}")).collect();
    DistributionTestResult::from_counts(support, expected, counts)
}

/// Frozen state for the gradient-variance study.
#[derive(Clone, Debug)]
pub struct VarianceSnapshot {
    pub params: ArchParams,
    pub weights: SupernetWeights,
    pub x: Tensor,
    pub y: Vec<usize>,
    pub tau: f64,
}

/// The `replicate`-th K-averaged architecture gradient, flattened. Each
/// `(k, replicate)` owns a disjoint counter range of its own stream, so
/// replicates can be computed in any order or in parallel.
pub fn k_averaged_gradient(
    snap: &VarianceSnapshot,
    k: usize,
    seed: u64,
    replicate: u64,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let stream = streams::STUDY | k as u64;
    let mut sum: Vec<f64> = Vec::new();
    for j in 0..k as u64 {
        let mut rng = rng_at(seed, stream, replicate * k as u64 + j);
        let g = sample_gradient(&snap.params, &snap.weights, &snap.x, &snap.y, snap.tau, Wrt::Arch, &mut rng)?;
        let flat: Vec<f64> = g.grads.into_iter().flatten().collect();
        if sum.is_empty() {
            sum = flat;
        } else {
            sum.iter_mut().zip(&flat).for_each(|(s, g)| *s += g);
        }
    }
    Ok(sum.into_iter().map(|s| s / k as f64).collect())
}

/// Per-parameter mean and unbiased variance of a set of samples.
fn moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let r = samples.len() as f64;
    let dim = samples.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for s in samples {
        mean.iter_mut().zip(s).for_each(|(m, x)| *m += x / r);
    }
    let mut var = vec![0.0; dim];
    for s in samples {
        var.iter_mut()
            .zip(s.iter().zip(&mean))
            .for_each(|(v, (x, m))| *v += (x - m) * (x - m) / (r - 1.0));
    }
    (mean, var)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub k_values: Vec<usize>,
    pub replicates: usize,
    /// Per K, per-parameter gradient variance.
    pub variance: Vec<Vec<f64>>,
    /// Per K, per-parameter gradient mean.
    pub mean: Vec<Vec<f64>>,
    /// Per K, mean of the per-parameter variances over parameters whose
    /// single-sample gradient varies.
    pub aggregate: Vec<f64>,
    /// `aggregate[K] / aggregate[K = 1]`.
    pub ratios: Vec<f64>,
    /// Per K, the largest |z| between its mean and the K = 1 mean.
    pub max_mean_z: Vec<f64>,
}

/// Builds the report from per-K replicate gradients. `k_values` must start
/// with 1.
pub fn variance_report(k_values: &[usize], samples: &[Vec<Vec<f64>>]) -> Result<VarianceReport> {
    if k_values.first() != Some(&1) || k_values.len() != samples.len() {
        return Err(Error::config("k list must start with 1 and match the samples"));
    }
    let replicates = samples[0].len();
    if replicates < 2 || samples.iter().any(|s| s.len() != replicates) {
        return Err(Error::config("every K needs the same replicate count (>= 2)"));
    }
    let (means, vars): (Vec<_>, Vec<_>) = samples.iter().map(|s| moments(s)).unzip();
    let active: Vec<usize> = (0..vars[0].len()).filter(|&i| vars[0][i] > 0.0).collect();
    if active.is_empty() {
        return Err(Error::contract("gradient has no sampling variance"));
    }
    let aggregate: Vec<f64> = vars
        .iter()
        .map(|v| active.iter().map(|&i| v[i]).sum::<f64>() / active.len() as f64)
        .collect();
    let r = replicates as f64;
    let max_mean_z = (0..k_values.len())
        .map(|ki| {
            active
                .iter()
                .map(|&i| {
                    let se = libm::sqrt(vars[0][i] / r + vars[ki][i] / r);
                    if se > 0.0 {
                        (means[ki][i] - means[0][i]).abs() / se
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(VarianceReport {
        k_values: k_values.to_vec(),
        replicates,
        ratios: aggregate.iter().map(|a| a / aggregate[0]).collect(),
        variance: vars,
        mean: means,
        aggregate,
        max_mean_z,
    })
}

/// Sequential variance study; see [`k_averaged_gradient`] for the parallel
/// building block.
pub fn gradient_variance_study(
    snap: &VarianceSnapshot,
    k_values: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<VarianceReport> {
    let samples = k_values
        .iter()
        .map(|&k| {
            (0..replicates as u64)
                .map(|r| k_averaged_gradient(snap, k, seed, r))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    variance_report(k_values, &samples)
}

/// Outcome of one search-then-retrain run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseTrial {
    pub seed: u64,
    pub method: SearchMethod,
    pub parameterless_fraction: f64,
    pub skip_count: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Searches with `method` and `seed`, then retrains the derived genotype.
pub fn collapse_trial(
    base: &SearchConfig,
    method: SearchMethod,
    seed: u64,
    data: &Splits,
    eval: &EvalConfig,
) -> Result<CollapseTrial> {
    let cfg = SearchConfig {
        method,
        seed,
        ..base.clone()
    };
    let out = run_search(&cfg, data)?;
    let normal = out.genotype.normal().expect("derived genotypes have a normal cell");
    let metrics = collapse_metrics(normal, &cfg.cell.op_set);
    let report = train_genotype(
        &out.genotype,
        &cfg.cell,
        cfg.num_cells,
        data,
        &EvalConfig {
            seed,
            ..eval.clone()
        },
    )?;
    Ok(CollapseTrial {
        seed,
        method,
        parameterless_fraction: metrics.parameterless_fraction,
        skip_count: metrics.skip_count,
        val_accuracy: report.val_accuracy,
        test_accuracy: report.test_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: SearchMethod,
    pub seeds: usize,
    pub mean_parameterless_fraction: f64,
    pub mean_skip_count: f64,
    pub mean_val_accuracy: f64,
    pub mean_test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    /// Sorted by seed, then method.
    pub trials: Vec<CollapseTrial>,
    pub summaries: Vec<MethodSummary>,
}

impl CollapseReport {
    /// Aggregates trials given in any order.
    pub fn from_trials(mut trials: Vec<CollapseTrial>) -> Self {
        trials.sort_by_key(|t| (t.seed, t.method));
        let mut methods: Vec<SearchMethod> = trials.iter().map(|t| t.method).collect();
        methods.sort();
        methods.dedup();
        let summaries = methods
            .into_iter()
            .map(|m| {
                let ts: Vec<&CollapseTrial> = trials.iter().filter(|t| t.method == m).collect();
                let n = ts.len() as f64;
                let mean = |f: fn(&CollapseTrial) -> f64| ts.iter().map(|t| f(t)).sum::<f64>() / n;
                MethodSummary {
                    method: m,
                    seeds: ts.len(),
                    mean_parameterless_fraction: mean(|t| t.parameterless_fraction),
                    mean_skip_count: mean(|t| t.skip_count as f64),
                    mean_val_accuracy: mean(|t| t.val_accuracy),
                    mean_test_accuracy: mean(|t| t.test_accuracy),
                }
            })
            .collect();
        CollapseReport { trials, summaries }
    }

    pub fn summary(&self, method: SearchMethod) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

/// Sequential collapse study over `methods x seeds`.
pub fn collapse_study(
    base: &SearchConfig,
    methods: &[SearchMethod],
    seeds: &[u64],
    data: &Splits,
    eval: &EvalConfig,
) -> Result<CollapseReport> {
    let mut trials = Vec::with_capacity(methods.len() * seeds.len());
    for &seed in seeds {
        for &m in methods {
            trials.push(collapse_trial(base, m, seed, data, eval)?);
        }
    }
    Ok(CollapseReport::from_trials(trials))
}
