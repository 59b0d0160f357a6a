//! Exact t-SNE for the three 2D layouts (image overview, patch patterns,
//! CLS patterns).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 500,
            exaggeration: 12.0,
            exaggeration_iterations: 250,
            learning_rate: 200.0,
            momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.perplexity.is_nan() || self.perplexity < 2.0 {
            return Err(Error::arg(format!("perplexity must be >= 2 (got {})", self.perplexity)));
        }
        if self.iterations == 0 {
            return Err(Error::arg("iterations must be >= 1"));
        }
        if [self.learning_rate, self.exaggeration].iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::arg("learning rate and exaggeration must be positive"));
        }
        Ok(())
    }

    /// Perplexity actually used for `n` points: the configured value capped
    /// at `(n - 1) / 3`, but never below 1.
    pub fn effective_perplexity(&self, n: usize) -> f64 {
        self.perplexity.min((n as f64 - 1.0) / 3.0).max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    /// `kl[t]` is the KL divergence of the layout after `t` updates, always
    /// measured against the unexaggerated joint distribution.
    pub kl: Vec<f64>,
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let d = points.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::arg("points must have at least one dimension"));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::arg("points differ in dimension"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::arg("points must be finite"));
    }
    Ok(d)
}

/// Row-major `n × n` squared Euclidean distances.
pub fn squared_distances(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    });
    out
}

/// Conditional distribution of one point with precision `beta`, plus its
/// Shannon entropy in nats. `self_index` gets probability 0.
fn conditional_row(dist: &[f64], self_index: usize, beta: f64, out: &mut [f64]) -> f64 {
    let min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != self_index)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (j, (&d, p)) in dist.iter().zip(out.iter_mut()).enumerate() {
        *p = if j == self_index { 0.0 } else { (-beta * (d - min)).exp() };
        z += *p;
    }
    let mut h = 0.0;
    for p in out.iter_mut() {
        *p /= z;
        if *p > 0.0 {
            h -= *p * p.ln();
        }
    }
    h
}

/// Per-point conditional distributions `p(j | i)` whose perplexity matches
/// `perplexity`, found by bisection on the Gaussian precision. Returns the
/// row-major matrix and each row's achieved perplexity.
pub fn conditional_probabilities(dist: &[f64], n: usize, perplexity: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if n < 2 || dist.len() != n * n {
        return Err(Error::shape(format!("{n}x{n} distances"), format!("{} values", dist.len())));
    }
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let achieved: Vec<f64> = p
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| {
            let d = &dist[i * n..(i + 1) * n];
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            let mut beta = 1.0;
            let mut h = conditional_row(d, i, beta, row);
            for _ in 0..200 {
                if (h - target).abs() < 1e-10 {
                    break;
                }
                if h > target {
                    lo = beta;
                    beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
                h = conditional_row(d, i, beta, row);
            }
            h.exp()
        })
        .collect();
    Ok((p, achieved))
}

/// Symmetrized joint distribution `(P + Pᵀ) / 2n`.
pub fn joint_probabilities(points: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = points.len();
    check_points(points)?;
    let (cond, _) = conditional_probabilities(&squared_distances(points), n, perplexity)?;
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(joint)
}

/// Student-t kernel `1 / (1 + |yi - yj|²)` (zero on the diagonal) and its
/// total.
fn kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let row_sums: Vec<f64> = num
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| {
            let mut s = 0.0;
            for (j, cell) in row.iter_mut().enumerate() {
                if i != j {
                    let dx = y[i][0] - y[j][0];
                    let dy = y[i][1] - y[j][1];
                    *cell = 1.0 / (1.0 + dx * dx + dy * dy);
                    s += *cell;
                }
            }
            s
        })
        .collect();
    (num, row_sums.iter().sum())
}

fn kl_divergence(p: &[f64], num: &[f64], total: f64) -> f64 {
    p.iter()
        .zip(num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &q)| pij * (pij / (q / total).max(1e-300)).ln())
        .sum()
}

/// Embeds `points` (one row per point) into 2D. Deterministic for a given
/// seed: the reductions run in a fixed order regardless of thread count.
pub fn tsne(points: &[Vec<f64>], config: &EmbeddingConfig) -> Result<Embedding> {
    config.validate()?;
    let n = points.len();
    if n < 3 {
        return Err(Error::arg(format!("t-SNE needs at least 3 points (got {n})")));
    }
    let p = joint_probabilities(points, config.effective_perplexity(n))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid sigma");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl = Vec::with_capacity(config.iterations + 1);

    for iter in 0..config.iterations {
        let (num, total) = kernel(&y);
        kl.push(kl_divergence(&p, &num, total));
        let exaggeration = if iter < config.exaggeration_iterations { config.exaggeration } else { 1.0 };
        let momentum = if iter < config.momentum_switch { config.momentum } else { config.final_momentum };
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    let w = (exaggeration * p[i * n + j] - num[i * n + j] / total) * num[i * n + j];
                    g[0] += w * (y[i][0] - y[j][0]);
                    g[1] += w * (y[i][1] - y[j][1]);
                }
                [4.0 * g[0], 4.0 * g[1]]
            })
            .collect();
        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > 0.0) == (update[i][d] > 0.0);
                gains[i][d] = if same_sign { (gains[i][d] * 0.8).max(0.01) } else { gains[i][d] + 0.2 };
                update[i][d] = momentum * update[i][d] - config.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        }
        for d in 0..2 {
            let mean = y.iter().map(|v| v[d]).sum::<f64>() / n as f64;
            y.iter_mut().for_each(|v| v[d] -= mean);
        }
    }
    let (num, total) = kernel(&y);
    kl.push(kl_divergence(&p, &num, total));
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::arg("t-SNE diverged"));
    }
    Ok(Embedding { coords: y, kl })
}

/// Mean silhouette coefficient of labelled 2D points. Points alone in their
/// cluster score 0.
pub fn silhouette(coords: &[[f64; 2]], labels: &[usize]) -> Result<f64> {
    if coords.len() != labels.len() || coords.is_empty() {
        return Err(Error::arg("silhouette needs one label per point"));
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::arg("silhouette needs at least two clusters"));
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let total: f64 = (0..coords.len())
        .map(|i| {
            let mut sums = vec![0.0; clusters.len()];
            let mut counts = vec![0usize; clusters.len()];
            for j in 0..coords.len() {
                if i != j {
                    let c = clusters.binary_search(&labels[j]).expect("known label");
                    sums[c] += dist(&coords[i], &coords[j]);
                    counts[c] += 1;
                }
            }
            let own = clusters.binary_search(&labels[i]).expect("known label");
            if counts[own] == 0 {
                return 0.0;
            }
            let a = sums[own] / counts[own] as f64;
            let b = (0..clusters.len())
                .filter(|&c| c != own && counts[c] > 0)
                .map(|c| sums[c] / counts[c] as f64)
                .fold(f64::INFINITY, f64::min);
            if a.max(b) == 0.0 {
                0.0
            } else {
                (b - a) / a.max(b)
            }
        })
        .sum();
    Ok(total / coords.len() as f64)
}
