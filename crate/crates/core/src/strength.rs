//! k-hop attention strength.
//!
//! For a patch at grid cell `(i, j)` the k-hop ring is every cell at
//! Chebyshev distance exactly `k`. A head's strength vector `s` averages,
//! over patches, the mean attention each patch pays to its k-hop ring.
//! Patches without a k-hop ring (e.g. the center of a 5×5 grid at k = 3)
//! are left out of that element's average.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{entropy_of, Matrix};

pub const ENTROPY_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthVector {
    pub image_id: String,
    pub layer: usize,
    pub head: usize,
    pub s: Vec<f64>,
    pub entropy_norm: f64,
}

/// Cells at Chebyshev distance exactly `k` from `(i, j)` in a `p × p` grid,
/// in row-major order.
pub fn ring(i: usize, j: usize, k: usize, p: usize) -> Result<Vec<(usize, usize)>> {
    if i >= p || j >= p || k >= p {
        return Err(Error::arg(format!("ring({i}, {j}, {k}) outside a {p}x{p} grid")));
    }
    let mut out = Vec::new();
    for r in i.saturating_sub(k)..=(i + k).min(p - 1) {
        for c in j.saturating_sub(k)..=(j + k).min(p - 1) {
            if r.abs_diff(i).max(c.abs_diff(j)) == k {
                out.push((r, c));
            }
        }
    }
    Ok(out)
}

/// Strength vector of a `p² × p²` patch-to-patch attention matrix.
pub fn strength_vector(a_patch: &Matrix) -> Result<Vec<f64>> {
    let n = a_patch.rows();
    let p = (n as f64).sqrt().round() as usize;
    if n == 0 || p * p != n || a_patch.cols() != n {
        return Err(Error::shape(
            "square p² x p² patch matrix",
            format!("{}x{}", a_patch.rows(), a_patch.cols()),
        ));
    }
    if a_patch.data().iter().any(|&v| v < 0.0) {
        return Err(Error::arg("attention must be nonnegative"));
    }
    let mut sums = vec![0.0f64; p];
    let mut counts = vec![0usize; p];
    for i in 0..p {
        for j in 0..p {
            let src = i * p + j;
            for k in 0..p {
                let cells = ring(i, j, k, p)?;
                if cells.is_empty() {
                    continue;
                }
                let total: f64 = cells
                    .iter()
                    .map(|&(r, c)| a_patch.get(src, r * p + c) as f64)
                    .sum();
                sums[k] += total / cells.len() as f64;
                counts[k] += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}

/// Shannon entropy of `s` (normalized to sum 1) divided by `ln p`.
pub fn strength_entropy(s: &[f64]) -> Result<f64> {
    if s.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::arg("strength vector must be finite and nonnegative"));
    }
    let total: f64 = s.iter().sum();
    if total <= 0.0 {
        return Err(Error::arg("strength vector is all zero"));
    }
    if s.len() < 2 {
        return Ok(0.0);
    }
    let h = entropy_of(s.iter().map(|&v| v / total));
    Ok((h / (s.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Strength profile of one head given its full `(1+p²)²` attention matrix.
pub fn head_strength(image_id: &str, layer: usize, head: usize, a: &Matrix) -> Result<StrengthVector> {
    if a.rows() < 2 || a.rows() != a.cols() {
        return Err(Error::shape("square (1+p²) attention", format!("{:?}", a.shape())));
    }
    let n = a.rows() - 1;
    let s = strength_vector(&a.submatrix(1, 1, n, n))?;
    let entropy_norm = strength_entropy(&s)?;
    Ok(StrengthVector {
        image_id: image_id.to_string(),
        layer,
        head,
        s,
        entropy_norm,
    })
}

/// Distribution of one head's normalized entropy over the image corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyDistribution {
    pub layer: usize,
    pub head: usize,
    /// Counts over [`ENTROPY_BINS`] uniform bins on `[0, 1]`.
    pub counts: Vec<u32>,
}

impl EntropyDistribution {
    pub fn from_values(layer: usize, head: usize, values: &[f64]) -> Self {
        let mut counts = vec![0u32; ENTROPY_BINS];
        for &v in values {
            let bin = ((v.clamp(0.0, 1.0) * ENTROPY_BINS as f64) as usize).min(ENTROPY_BINS - 1);
            counts[bin] += 1;
        }
        Self { layer, head, counts }
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// All-pairs oracle: classify every (source, target) pair by Chebyshev
    /// distance, without going through `ring`.
    fn oracle(a: &Matrix, p: usize) -> Vec<f64> {
        let n = p * p;
        let mut s = vec![0.0f64; p];
        let mut owners = vec![0usize; p];
        for src in 0..n {
            let mut sums = vec![0.0f64; p];
            let mut counts = vec![0usize; p];
            for dst in 0..n {
                let d = (src / p).abs_diff(dst / p).max((src % p).abs_diff(dst % p));
                sums[d] += a.get(src, dst) as f64;
                counts[d] += 1;
            }
            for k in 0..p {
                if counts[k] > 0 {
                    s[k] += sums[k] / counts[k] as f64;
                    owners[k] += 1;
                }
            }
        }
        s.iter().zip(&owners).map(|(v, &c)| v / c as f64).collect()
    }

    fn random_stochastic(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut m = Matrix::from_fn(n, n, |_, _| rng.random_range(0.0f32..1.0));
        for r in 0..n {
            let s: f32 = m.row(r).iter().sum();
            m.row_mut(r).iter_mut().for_each(|v| *v /= s);
        }
        m
    }

    #[test]
    fn ring_counts_from_corner_and_center() {
        let sizes: Vec<usize> = (0..5).map(|k| ring(0, 0, k, 5).unwrap().len()).collect();
        assert_eq!(sizes, vec![1, 3, 5, 7, 9]);
        assert_eq!(ring(2, 2, 0, 5).unwrap(), vec![(2, 2)]);
        assert!(ring(2, 2, 3, 5).unwrap().is_empty());
        assert!(ring(2, 2, 4, 5).unwrap().is_empty());
        assert!(ring(5, 0, 0, 5).is_err());
        assert!(ring(0, 0, 5, 5).is_err());
    }

    #[test]
    fn identity_and_uniform() {
        let s = strength_vector(&Matrix::identity(16)).unwrap();
        assert_eq!(s, vec![1.0, 0.0, 0.0, 0.0]);
        let u = strength_vector(&Matrix::from_fn(16, 16, |_, _| 1.0 / 16.0)).unwrap();
        for v in u {
            assert!((v - 1.0 / 16.0).abs() < 1e-12);
        }
        assert!(strength_vector(&Matrix::zeros(15, 15)).is_err());
        assert!(strength_vector(&Matrix::zeros(16, 9)).is_err());
    }

    #[test]
    fn matches_all_pairs_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for p in 2..=8 {
            for _ in 0..50 {
                let a = random_stochastic(p * p, &mut rng);
                let s = strength_vector(&a).unwrap();
                assert_eq!(s, oracle(&a, p), "p={p}");
                assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(strength_entropy(&[0.0, 1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((strength_entropy(&[0.2; 5]).unwrap() - 1.0).abs() < 1e-12);
        assert!((strength_entropy(&[0.5, 0.25, 0.25, 0.0]).unwrap() - 0.75).abs() < 1e-12);
        assert!(strength_entropy(&[0.0, 0.0]).is_err());

        let onehot = [1.0, 0.0, 0.0, 0.0];
        let mixed: Vec<f64> = onehot.iter().map(|v| 0.5 * v + 0.5 * 0.25).collect();
        let h = strength_entropy(&mixed).unwrap();
        assert!(h > 0.0 && h < 1.0);
    }

    #[test]
    fn histogram_counts_every_image() {
        let d = EntropyDistribution::from_values(0, 1, &[0.0, 0.05, 0.5, 0.999, 1.0]);
        assert_eq!(d.total(), 5);
        assert_eq!(d.counts[0], 1);
        assert_eq!(d.counts[1], 1);
        assert_eq!(d.counts[10], 1);
        assert_eq!(d.counts[19], 2);
    }
}
