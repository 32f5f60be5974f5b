//! Deterministic synthetic classification tasks.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_at, streams};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Gaussian clusters around random centers on a sphere of radius 3.
    Blobs,
    /// Interleaved spiral arms in the first two features.
    Spirals,
    /// Checkerboard over the first two features with `classes` colors.
    XorGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    /// Total sample count across all splits.
    pub samples: usize,
    pub noise: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::Spirals,
            classes: 3,
            samples: 1200,
            noise: 0.05,
            feature_dim: 4,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("dataset needs at least 2 classes"));
        }
        if self.samples < 10 * self.classes {
            return Err(Error::config(format!(
                "dataset needs at least {} samples for {} classes, got {}",
                10 * self.classes,
                self.classes,
                self.samples
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config("dataset noise must be finite and non-negative"));
        }
        let min_dim = if self.kind == DatasetKind::Blobs { 1 } else { 2 };
        if self.feature_dim < min_dim {
            return Err(Error::config(format!(
                "{:?} needs feature_dim >= {min_dim}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Row-major features with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Features and labels of the given rows.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(Error::Index {
                    index: r,
                    len: self.len(),
                });
            }
            data.extend_from_slice(self.features.row(r));
            labels.push(self.labels[r]);
        }
        Ok((Tensor::matrix(rows.len(), d, data)?, labels))
    }

    /// Fraction of samples belonging to the most common class.
    pub fn majority_rate(&self) -> f64 {
        let mut counts = alloc::vec![0usize; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts.iter().copied().max().unwrap_or(0) as f64 / self.len().max(1) as f64
    }

    fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let (features, labels) = self.batch(rows)?;
        Ok(Dataset {
            features,
            labels,
            classes: self.classes,
        })
    }
}

/// Search pool halves (`train` for weights, `val` for architecture) plus a
/// held-out `test` split.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Fraction of samples held out for testing.
const TEST_FRACTION: f64 = 0.25;

/// Generates the task and splits it. Classes are balanced before shuffling.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let d = spec.feature_dim;
    let mut rng = rng_at(spec.seed, streams::DATA, 0);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
            v.into_iter().map(|x| 3.0 * x / norm).collect()
        })
        .collect();

    let mut features = Vec::with_capacity(spec.samples * d);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let mut label = i % spec.classes;
        let mut x = alloc::vec![0.0; d];
        match spec.kind {
            DatasetKind::Blobs => x.copy_from_slice(&centers[label]),
            DatasetKind::Spirals => {
                let t: f64 = rng.random();
                let r = 0.1 + 0.9 * t;
                let angle = 3.0 * PI * t + 2.0 * PI * label as f64 / spec.classes as f64;
                x[0] = r * libm::cos(angle);
                x[1] = r * libm::sin(angle);
            }
            DatasetKind::XorGrid => {
                for v in x.iter_mut() {
                    *v = 2.0 * rng.random::<f64>() - 1.0;
                }
                let m = spec.classes as f64;
                let cell = |v: f64| (((v + 1.0) / 2.0 * m) as usize).min(spec.classes - 1);
                label = (cell(x[0]) + cell(x[1])) % spec.classes;
            }
        }
        for v in x.iter_mut() {
            *v += spec.noise * rng.sample::<f64, _>(StandardNormal);
        }
        features.extend_from_slice(&x);
        labels.push(label);
    }
    let all = Dataset {
        features: Tensor::matrix(spec.samples, d, features)?,
        labels,
        classes: spec.classes,
    };

    let mut order: Vec<usize> = (0..spec.samples).collect();
    order.shuffle(&mut rng_at(spec.seed, streams::SHUFFLE, 0));
    let n_test = ((spec.samples as f64) * TEST_FRACTION) as usize;
    let (test, pool) = order.split_at(n_test);
    let (train, val) = pool.split_at(pool.len() / 2);
    Ok(Splits {
        train: all.subset(train)?,
        val: all.subset(val)?,
        test: all.subset(test)?,
    })
}
