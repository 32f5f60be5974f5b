//! Gumbel reparameterization: noise, Gumbel-Max, Gumbel-Softmax with a
//! straight-through hard sample, Gumbel-Top2 and temperature annealing.
//!
//! Hard selections are taken by ranking the perturbed log-probabilities
//! `log_softmax(logits) + g`. Softmax is strictly monotone, so this is the
//! same ranking as the relaxed vector, but it stays well defined when low
//! temperatures underflow every non-maximal relaxed entry to zero.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{numeric, Graph, Tensor, Var};
use crate::{Error, Result};

/// Uniform draws are clamped into `[UNIFORM_CLAMP, 1 - UNIFORM_CLAMP]`.
pub const UNIFORM_CLAMP: f64 = 1e-12;

/// Gumbel(0, 1) transform of a uniform draw.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -libm::log(-libm::log(u))
}

/// One Gumbel(0, 1) variate per category.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise {
    values: Vec<f64>,
}

impl GumbelNoise {
    pub fn from_values(values: Vec<f64>) -> Self {
        GumbelNoise { values }
    }

    pub fn zeros(n: usize) -> Self {
        GumbelNoise {
            values: vec![0.0; n],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `n` i.i.d. Gumbel(0, 1) variates.
pub fn sample_gumbel<R: Rng + ?Sized>(n: usize, rng: &mut R) -> GumbelNoise {
    GumbelNoise {
        values: (0..n)
            .map(|_| gumbel_from_uniform(rng.random::<f64>()))
            .collect(),
    }
}

/// `log_softmax(logits) + noise`.
pub fn perturbed_log_probs(logits: &[f64], noise: &GumbelNoise) -> Result<Vec<f64>> {
    if logits.len() != noise.len() {
        return Err(Error::Shape {
            op: "gumbel",
            lhs: vec![logits.len()],
            rhs: vec![noise.len()],
        });
    }
    Ok(numeric::log_softmax(logits)
        .into_iter()
        .zip(noise.values())
        .map(|(l, g)| l + g)
        .collect())
}

/// Gumbel-Max: index of the largest perturbed log-probability. The index is
/// distributed as `softmax(logp)`.
pub fn gumbel_max(logp: &[f64], noise: &GumbelNoise) -> Result<usize> {
    if logp.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain {
            op: "gumbel_max",
            detail: format!("non-finite log-probabilities {logp:?}"),
        });
    }
    Ok(numeric::argmax(&perturbed_log_probs(logp, noise)?))
}

/// Gumbel-Top2 on plain values: the two largest perturbed log-probabilities,
/// larger first. Distributed as two draws without replacement from
/// `softmax(logits)`.
pub fn gumbel_top2_hard(logits: &[f64], noise: &GumbelNoise) -> Result<(usize, usize)> {
    if logits.len() < 2 {
        return Err(Error::contract("gumbel_top2 needs at least two categories"));
    }
    Ok(numeric::top2(&perturbed_log_probs(logits, noise)?))
}

fn one_hot(n: usize, hot: &[usize]) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for &i in hot {
        v[i] = 1.0;
    }
    v
}

/// A relaxed categorical sample recorded on a graph.
#[derive(Clone, Debug)]
pub struct CategoricalSample {
    pub index: usize,
    /// Exactly one-hot.
    pub hard: Vec<f64>,
    /// `softmax((log_softmax(alpha) + g) / tau)`.
    pub soft: Var,
    /// Straight-through value: forward `hard`, backward into `soft`.
    pub gate: Var,
}

/// A relaxed Gumbel-Top2 sample recorded on a graph.
#[derive(Clone, Debug)]
pub struct Top2Sample {
    /// Larger perturbed score first.
    pub indices: (usize, usize),
    /// Exactly two ones.
    pub hard: Vec<f64>,
    pub soft: Var,
    /// Straight-through value: forward `hard`, backward into `soft`.
    pub gate: Var,
}

fn relaxed(graph: &mut Graph, alpha: Var, tau: f64, noise: &GumbelNoise) -> Result<(Vec<f64>, Var)> {
    let n = graph.value(alpha).len();
    if noise.len() != n || graph.value(alpha).rank() != 1 {
        return Err(Error::Shape {
            op: "gumbel_softmax",
            lhs: graph.value(alpha).shape().to_vec(),
            rhs: vec![noise.len()],
        });
    }
    let log_probs = graph.log_softmax(alpha)?;
    let g = graph.constant(Tensor::vector(noise.values().to_vec()))?;
    let perturbed = graph.add(log_probs, g)?;
    let soft = graph.softmax(perturbed, tau)?;
    Ok((graph.value(perturbed).data().to_vec(), soft))
}

/// Gumbel-Softmax with straight-through hard sample, using the given noise.
pub fn gumbel_softmax(
    graph: &mut Graph,
    alpha: Var,
    tau: f64,
    noise: &GumbelNoise,
) -> Result<CategoricalSample> {
    let (perturbed, soft) = relaxed(graph, alpha, tau, noise)?;
    let index = numeric::argmax(&perturbed);
    let hard = one_hot(perturbed.len(), &[index]);
    let gate = graph.straight_through(Tensor::vector(hard.clone()), soft)?;
    Ok(CategoricalSample {
        index,
        hard,
        soft,
        gate,
    })
}

/// [`gumbel_softmax`] with freshly drawn noise.
pub fn gumbel_softmax_sampled<R: Rng + ?Sized>(
    graph: &mut Graph,
    alpha: Var,
    tau: f64,
    rng: &mut R,
) -> Result<CategoricalSample> {
    let noise = sample_gumbel(graph.value(alpha).len(), rng);
    gumbel_softmax(graph, alpha, tau, &noise)
}

/// Gumbel-Top2 with straight-through hard sample, using the given noise.
pub fn gumbel_top2(
    graph: &mut Graph,
    beta: Var,
    tau: f64,
    noise: &GumbelNoise,
) -> Result<Top2Sample> {
    if graph.value(beta).len() < 2 {
        return Err(Error::contract("gumbel_top2 needs at least two categories"));
    }
    let (perturbed, soft) = relaxed(graph, beta, tau, noise)?;
    let indices = numeric::top2(&perturbed);
    let hard = one_hot(perturbed.len(), &[indices.0, indices.1]);
    let gate = graph.straight_through(Tensor::vector(hard.clone()), soft)?;
    Ok(Top2Sample {
        indices,
        hard,
        soft,
        gate,
    })
}

/// Marginal inclusion probability of category `j` when two categories are
/// drawn without replacement from `p`: `p_j + sum_{i != j} p_i p_j / (1 - p_i)`.
pub fn top2_marginal_closed_form(p: &[f64], j: usize) -> Result<f64> {
    validate_simplex(p)?;
    if j >= p.len() {
        return Err(Error::Index {
            index: j,
            len: p.len(),
        });
    }
    let mut total = p[j];
    for (i, &pi) in p.iter().enumerate() {
        if i != j {
            total += pi * p[j] / (1.0 - pi);
        }
    }
    Ok(total)
}

/// Checks that `p` is a probability simplex with at least two categories and
/// no certain category.
pub fn validate_simplex(p: &[f64]) -> Result<()> {
    if p.len() < 2 {
        return Err(Error::Domain {
            op: "simplex",
            detail: format!("need at least two categories, got {}", p.len()),
        });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Domain {
            op: "simplex",
            detail: format!("not a probability simplex: {p:?}"),
        });
    }
    if p.iter().any(|&x| x >= 1.0) {
        return Err(Error::Domain {
            op: "simplex",
            detail: "a category has probability 1".into(),
        });
    }
    Ok(())
}

/// Linear temperature annealing from `tau_start` at epoch 0 to `tau_end` at
/// the last epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_epochs: usize,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            tau_start: 10.0,
            tau_end: 0.1,
            total_epochs: 50,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau_end > 0.0
            && self.tau_start >= self.tau_end
            && self.tau_start.is_finite()
            && self.total_epochs >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "temperature schedule needs tau_start >= tau_end > 0 and at least one epoch: {self:?}"
            )))
        }
    }

    pub fn anneal(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::contract(format!(
                "epoch {epoch} outside schedule of {} epochs",
                self.total_epochs
            )));
        }
        if self.total_epochs == 1 {
            return Ok(self.tau_start);
        }
        let frac = epoch as f64 / (self.total_epochs - 1) as f64;
        Ok(self.tau_start + (self.tau_end - self.tau_start) * frac)
    }
}
