//! Plain-slice numerics shared by the tape and the graph-free sampling paths.
//!
//! Both paths must agree bit for bit, so the tape's forward values are
//! computed by these same functions.

use alloc::vec::Vec;

/// `log(sum(exp(xs)))` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = max_value(xs);
    let sum: f64 = xs.iter().map(|&x| libm::exp(x - max)).sum();
    max + libm::log(sum)
}

/// `softmax(xs / temperature)` with max subtraction.
pub fn softmax(xs: &[f64], temperature: f64) -> Vec<f64> {
    let max = max_value(xs);
    let mut out: Vec<f64> = xs
        .iter()
        .map(|&x| libm::exp((x - max) / temperature))
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&x| x - lse).collect()
}

pub fn max_value(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Indices of the two largest entries, larger first; ties go to the lowest
/// index.
///
/// # Panics
/// If `xs` has fewer than two entries.
pub fn top2(xs: &[f64]) -> (usize, usize) {
    assert!(xs.len() >= 2, "top2 needs at least two entries");
    let first = argmax(xs);
    let mut second = usize::MAX;
    for (i, &x) in xs.iter().enumerate() {
        if i == first {
            continue;
        }
        if second == usize::MAX || x > xs[second] {
            second = i;
        }
    }
    (first, second)
}
