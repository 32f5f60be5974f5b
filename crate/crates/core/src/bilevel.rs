//! Alternating search: K-sample architecture updates on validation batches,
//! then K-sample weight updates on training batches.
//!
//! The architecture gradient is the mean of its K per-sample gradients, the
//! weight gradient is their plain sum. The asymmetry is deliberate and both
//! update functions report exactly what they handed to the optimizer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::gumbel::TemperatureSchedule;
use crate::optim::{cosine_lr, Optimizer, OptimizerConfig};
use crate::rng::{rng_at, streams, StreamRng};
use crate::space::{
    choose_hard, collapse_metrics, derive_genotype, forward_single_path, sample_architecture,
    ArchChoice, ArchNoise, ArchParams, CellSpec, CellType, Genotype, NetworkSpec, OpSetName,
    SampledArchitecture, SearchMethod, SupernetWeights,
};
use crate::tensor::{numeric, Binder, Graph, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub method: SearchMethod,
    /// Architectures sampled per update.
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Base settings; its learning rate decays along a cosine over epochs.
    pub theta_optimizer: OptimizerConfig,
    pub arch_optimizer: OptimizerConfig,
    pub tau_start: f64,
    pub tau_end: f64,
    pub seed: u64,
    pub cell: CellSpec,
    pub num_cells: usize,
    /// Global L2 bound on the summed weight gradient; `None` disables it.
    pub grad_clip: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            method: SearchMethod::RomeV2,
            k: 7,
            epochs: 50,
            batch_size: 64,
            theta_optimizer: OptimizerConfig::sgd(0.05, 0.9),
            arch_optimizer: OptimizerConfig::adam(3e-4),
            tau_start: 10.0,
            tau_end: 0.1,
            seed: 0,
            cell: CellSpec::new(4, OpSetName::S3.ops(), 8),
            num_cells: 4,
            grad_clip: Some(5.0),
        }
    }
}

impl SearchConfig {
    pub fn schedule(&self) -> TemperatureSchedule {
        TemperatureSchedule {
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            total_epochs: self.epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        self.theta_optimizer.validate()?;
        self.arch_optimizer.validate()?;
        self.schedule().validate()?;
        validate_clip(self.grad_clip)?;
        self.cell.validate()
    }

    /// Network for a dataset with the given input width and class count.
    pub fn network(&self, input_dim: usize, num_classes: usize) -> NetworkSpec {
        NetworkSpec {
            cell: self.cell.clone(),
            input_dim,
            num_classes,
            num_cells: self.num_cells,
        }
    }
}

fn validate_clip(clip: Option<f64>) -> Result<()> {
    match clip {
        Some(c) if !(c.is_finite() && c > 0.0) => {
            Err(Error::config("grad_clip must be positive and finite"))
        }
        _ => Ok(()),
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before rescaling.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>());
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Per-parameter gradient sums.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientAccumulator {
    buffers: Vec<Vec<f64>>,
    count: usize,
}

impl GradientAccumulator {
    pub fn new(params: &[Tensor]) -> Self {
        GradientAccumulator {
            buffers: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn add(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.buffers.len() {
            return Err(Error::contract("gradient list does not match accumulator"));
        }
        for (b, g) in self.buffers.iter_mut().zip(grads) {
            if b.len() != g.len() {
                return Err(Error::contract("gradient length does not match accumulator"));
            }
            for (b, g) in b.iter_mut().zip(g) {
                *b += g;
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Returns the sum multiplied by `scale` and zeroes the buffers.
    pub fn take(&mut self, scale: f64) -> Vec<Vec<f64>> {
        let out = self
            .buffers
            .iter_mut()
            .map(|b| {
                let v = b.iter().map(|x| x * scale).collect();
                b.iter_mut().for_each(|x| *x = 0.0);
                v
            })
            .collect();
        self.count = 0;
        out
    }
}

/// Which side of the bi-level problem receives gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    Arch,
    Weights,
}

/// Loss and gradients of one sampled architecture.
#[derive(Clone, Debug)]
pub struct SampleGradient {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub choice: ArchChoice,
}

/// Evaluates one architecture drawn from `rng` on a batch. Architecture noise
/// is drawn first, then any `noise` operation consumes the same generator.
pub fn sample_gradient(
    params: &ArchParams,
    weights: &SupernetWeights,
    x: &Tensor,
    y: &[usize],
    tau: f64,
    wrt: Wrt,
    rng: &mut StreamRng,
) -> Result<SampleGradient> {
    let noise = ArchNoise::draw(params, rng);
    let mut graph = Graph::new();
    let mut arch = Binder::new(params.tensors(), wrt == Wrt::Arch);
    let mut theta = Binder::new(weights.tensors(), wrt == Wrt::Weights);
    let sampled = match wrt {
        Wrt::Arch => sample_architecture(&mut graph, &mut arch, params, tau, &noise)?,
        // alpha is constant here and every gate's forward value is exactly 1,
        // so the gate-free path yields identical weight gradients
        Wrt::Weights => SampledArchitecture::fixed(choose_hard(params, &noise)?),
    };
    let out = forward_single_path(&mut graph, weights, &mut theta, &sampled, x, rng)?;
    let loss = graph.cross_entropy(out.logits, y)?;
    let grads = graph.backward(loss)?;
    let grads = match wrt {
        Wrt::Arch => arch.gradients(&grads),
        Wrt::Weights => theta.gradients(&grads),
    };
    Ok(SampleGradient {
        loss: graph.value(loss).data()[0],
        grads,
        choice: sampled.choice,
    })
}

/// What one K-sample update computed and applied.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub mean_loss: f64,
    /// Gradient passed to the optimizer: mean for architecture steps, sum
    /// for weight steps (after clipping, if enabled).
    pub applied: Vec<Vec<f64>>,
    /// L2 norm of the gradient before any clipping.
    pub grad_norm: f64,
    pub samples: usize,
}

fn accumulate(
    params: &ArchParams,
    weights: &SupernetWeights,
    batch: (&Tensor, &[usize]),
    k: usize,
    tau: f64,
    wrt: Wrt,
    (seed, stream): (u64, u64),
    acc: &mut GradientAccumulator,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let mut loss_sum = 0.0;
    for sample in 0..k {
        let mut rng = rng_at(seed, stream, sample as u64);
        let diag = |choice: Option<&ArchChoice>| Error::NonFiniteLoss {
            seed,
            stream,
            sample,
            arch: choice.map(|c| format!("{c:?}")).unwrap_or_default(),
        };
        let g = match sample_gradient(params, weights, batch.0, batch.1, tau, wrt, &mut rng) {
            Ok(g) => g,
            Err(Error::NonFinite { .. }) => {
                let noise = ArchNoise::draw(params, &mut rng_at(seed, stream, sample as u64));
                return Err(diag(choose_hard(params, &noise).ok().as_ref()));
            }
            Err(e) => return Err(e),
        };
        if !g.loss.is_finite() || g.grads.iter().flatten().any(|x| !x.is_finite()) {
            return Err(diag(Some(&g.choice)));
        }
        loss_sum += g.loss;
        acc.add(&g.grads)?;
    }
    Ok(loss_sum / k as f64)
}

/// Architecture step: K samples on a validation batch, gradients averaged.
/// Sample `k` uses generator `(seed, stream, k)`. Weights are read only.
#[allow(clippy::too_many_arguments)]
pub fn update_arch(
    params: &mut ArchParams,
    optimizer: &mut Optimizer,
    weights: &SupernetWeights,
    batch: (&Tensor, &[usize]),
    k: usize,
    tau: f64,
    rng: (u64, u64),
) -> Result<StepReport> {
    let mut acc = GradientAccumulator::new(params.tensors());
    let mean_loss = accumulate(params, weights, batch, k, tau, Wrt::Arch, rng, &mut acc)?;
    let applied = acc.take(1.0 / k as f64);
    let grad_norm = libm::sqrt(applied.iter().flatten().map(|g| g * g).sum::<f64>());
    optimizer.step(params.tensors_mut(), &applied)?;
    Ok(StepReport {
        mean_loss,
        applied,
        grad_norm,
        samples: k,
    })
}

/// Weight step: K samples on a training batch, gradients summed, then
/// optionally norm-clipped. Architecture parameters are read only.
#[allow(clippy::too_many_arguments)]
pub fn update_weights(
    weights: &mut SupernetWeights,
    optimizer: &mut Optimizer,
    params: &ArchParams,
    batch: (&Tensor, &[usize]),
    k: usize,
    tau: f64,
    rng: (u64, u64),
    grad_clip: Option<f64>,
) -> Result<StepReport> {
    validate_clip(grad_clip)?;
    let mut acc = GradientAccumulator::new(weights.tensors());
    let mean_loss = accumulate(params, weights, batch, k, tau, Wrt::Weights, rng, &mut acc)?;
    let mut applied = acc.take(1.0);
    let grad_norm = match grad_clip {
        Some(c) => clip_global_norm(&mut applied, c),
        None => libm::sqrt(applied.iter().flatten().map(|g| g * g).sum::<f64>()),
    };
    optimizer.step(weights.tensors_mut(), &applied)?;
    Ok(StepReport {
        mean_loss,
        applied,
        grad_norm,
        samples: k,
    })
}

/// One row per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Iterations completed so far.
    pub iter: usize,
    pub tau: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Collapse metrics of the normal cell of the genotype derived at epoch end.
    pub parameterless_fraction: f64,
    pub skip_count: usize,
    /// Mean operation probabilities per cell type, in op-set order.
    pub op_prob_means: [Vec<f64>; 2],
    pub theta_lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<EpochRecord>,
}

impl SearchTrace {
    pub const CSV_HEADER: &'static str =
        "epoch,iter,tau,train_loss,val_loss,parameterless_fraction,skip_count";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.iter,
                r.tau,
                r.train_loss,
                r.val_loss,
                r.parameterless_fraction,
                r.skip_count
            );
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub trace: SearchTrace,
    pub params: ArchParams,
    pub weights: SupernetWeights,
}

fn shuffled(len: usize, seed: u64, counter: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_at(seed, streams::SHUFFLE, counter));
    order
}

/// Full search. Each iteration pairs one validation batch (architecture step)
/// with one training batch (weight step), in that order.
pub fn run_search(config: &SearchConfig, data: &Splits) -> Result<SearchOutcome> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::config("search needs non-empty train and val splits"));
    }
    let spec = config.network(data.train.feature_dim(), data.train.classes);
    spec.validate()?;
    let seed = config.seed;
    let mut params = ArchParams::init(config.method, config.cell.clone(), &mut rng_at(seed, streams::INIT, 0))?;
    let mut weights = SupernetWeights::init(&spec, &mut rng_at(seed, streams::INIT, 1))?;
    let mut arch_opt = Optimizer::new(config.arch_optimizer, params.tensors())?;
    let mut theta_opt = Optimizer::new(config.theta_optimizer, weights.tensors())?;
    let schedule = config.schedule();

    let batch = config.batch_size.min(data.train.len()).min(data.val.len());
    let iters_per_epoch = (data.train.len().min(data.val.len()) / batch).max(1);
    let mut trace = SearchTrace::default();
    let mut iter = 0usize;
    for epoch in 0..config.epochs {
        let tau = schedule.anneal(epoch)?;
        let lr = cosine_lr(config.theta_optimizer.lr(), epoch, config.epochs);
        theta_opt.set_lr(lr);
        let train_order = shuffled(data.train.len(), seed, 2 * epoch as u64);
        let val_order = shuffled(data.val.len(), seed, 2 * epoch as u64 + 1);
        let (mut train_loss, mut val_loss) = (0.0, 0.0);
        for b in 0..iters_per_epoch {
            let rows = b * batch..(b + 1) * batch;
            let (vx, vy) = data.val.batch(&val_order[rows.clone()])?;
            let (tx, ty) = data.train.batch(&train_order[rows])?;
            let arch = update_arch(
                &mut params,
                &mut arch_opt,
                &weights,
                (&vx, &vy),
                config.k,
                tau,
                (seed, streams::arch_step(iter as u64)),
            )?;
            let w = update_weights(
                &mut weights,
                &mut theta_opt,
                &params,
                (&tx, &ty),
                config.k,
                tau,
                (seed, streams::weight_step(iter as u64)),
                config.grad_clip,
            )?;
            val_loss += arch.mean_loss;
            train_loss += w.mean_loss;
            iter += 1;
        }
        let genotype = derive_genotype(&params);
        let metrics = collapse_metrics(
            genotype.normal().expect("derived genotypes have a normal cell"),
            &config.cell.op_set,
        );
        trace.records.push(EpochRecord {
            epoch,
            iter,
            tau,
            train_loss: train_loss / iters_per_epoch as f64,
            val_loss: val_loss / iters_per_epoch as f64,
            parameterless_fraction: metrics.parameterless_fraction,
            skip_count: metrics.skip_count,
            op_prob_means: [
                params.op_prob_means(CellType::Normal),
                params.op_prob_means(CellType::Reduction),
            ],
            theta_lr: lr,
        });
    }
    Ok(SearchOutcome {
        genotype: derive_genotype(&params),
        trace,
        params,
        weights,
    })
}

/// Retraining settings for a derived genotype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            epochs: 60,
            batch_size: 32,
            optimizer: OptimizerConfig::sgd(0.05, 0.9),
            grad_clip: Some(5.0),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub final_train_loss: f64,
}

/// Classification accuracy of a fixed architecture.
pub fn accuracy(
    weights: &SupernetWeights,
    arch: &SampledArchitecture,
    data: &Dataset,
    rng: &mut StreamRng,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in rows.chunks(256) {
        let (x, y) = data.batch(chunk)?;
        let mut graph = Graph::new();
        let mut theta = Binder::new(weights.tensors(), false);
        let out = forward_single_path(&mut graph, weights, &mut theta, arch, &x, rng)?;
        let logits = graph.value(out.logits);
        correct += (0..chunk.len())
            .filter(|&r| numeric::argmax(logits.row(r)) == y[r])
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains the discrete network of `genotype` from fresh weights on the train
/// split with cosine-decayed SGD and reports accuracies on all splits.
pub fn train_genotype(
    genotype: &Genotype,
    cell: &CellSpec,
    num_cells: usize,
    data: &Splits,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.optimizer.validate()?;
    validate_clip(config.grad_clip)?;
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::config("evaluation needs epochs and batch_size >= 1"));
    }
    let spec = NetworkSpec {
        cell: cell.clone(),
        input_dim: data.train.feature_dim(),
        num_classes: data.train.classes,
        num_cells,
    };
    spec.validate()?;
    let arch = SampledArchitecture::fixed(genotype.to_choice(cell)?);
    let seed = config.seed;
    let mut weights = SupernetWeights::init(&spec, &mut rng_at(seed, streams::EVAL, 0))?;
    let mut opt = Optimizer::new(config.optimizer, weights.tensors())?;
    let batch = config.batch_size.min(data.train.len());
    let mut last_loss = f64::NAN;
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        opt.set_lr(cosine_lr(config.optimizer.lr(), epoch, config.epochs));
        let order = shuffled(data.train.len(), seed ^ 0x5EED, epoch as u64);
        let mut loss_sum = 0.0;
        let chunks = order.chunks_exact(batch);
        let n = chunks.len();
        for rows in chunks {
            let (x, y) = data.train.batch(rows)?;
            let mut graph = Graph::new();
            let mut theta = Binder::new(weights.tensors(), true);
            let mut rng = rng_at(seed, streams::EVAL, 1 + step);
            let out = forward_single_path(&mut graph, &weights, &mut theta, &arch, &x, &mut rng)?;
            let loss = graph.cross_entropy(out.logits, &y)?;
            let mut grads = theta.gradients(&graph.backward(loss)?);
            if let Some(c) = config.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            loss_sum += graph.value(loss).data()[0];
            opt.step(weights.tensors_mut(), &grads)?;
            step += 1;
        }
        last_loss = loss_sum / n.max(1) as f64;
    }
    let mut rng = rng_at(seed, streams::EVAL, u64::MAX >> 8);
    Ok(EvalReport {
        train_accuracy: accuracy(&weights, &arch, &data.train, &mut rng)?,
        val_accuracy: accuracy(&weights, &arch, &data.val, &mut rng)?,
        test_accuracy: accuracy(&weights, &arch, &data.test, &mut rng)?,
        final_train_loss: last_loss,
    })
}
