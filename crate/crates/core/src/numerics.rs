//! Dense row-major matrices and the probability/distance primitives the
//! analyses are built from.
//!
//! Entropies and divergences use natural logarithms throughout, so a
//! Jensen-Shannon divergence lies in `[0, ln 2]`.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the sum of a [`ProbVector`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

/// Row-major dense matrix. `f32` is the working precision; `f64` is used
/// where finite-difference checks need the extra headroom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Float> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{rows}x{cols} ({} values)", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("matrix contains non-finite values"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Copies the block `rows x cols` starting at `(r0, c0)`.
    pub fn submatrix(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |r, c| self.get(r0 + r, c0 + c))
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                format!("lhs cols == rhs rows ({})", self.cols),
                format!("rhs rows {}", rhs.rows),
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_transposed(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::shape(
                format!("equal inner dims ({})", self.cols),
                format!("{}", rhs.cols),
            ));
        }
        Ok(Self::from_fn(self.rows, rhs.rows, |r, c| dot(self.row(r), rhs.row(c))))
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[T]) {
        debug_assert_eq!(bias.len(), self.cols);
        for r in 0..self.rows {
            for (v, &b) in self.row_mut(r).iter_mut().zip(bias) {
                *v = *v + b;
            }
        }
    }

    pub fn add_assign(&mut self, rhs: &Self) {
        debug_assert_eq!(self.shape(), rhs.shape());
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a + b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// A discrete probability distribution: nonnegative and summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct ProbVector(Vec<f32>);

impl ProbVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::arg("probability vector is empty"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::arg("probability vector has negative or non-finite entries"));
        }
        let sum: f64 = values.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::arg(format!("probability vector sums to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Indices and probabilities of the `k` most likely entries, ties going
    /// to the lower index.
    pub fn top_k(&self, k: usize) -> Vec<(usize, f32)> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx.into_iter().take(k).map(|i| (i, self.0[i])).collect()
    }

    pub fn argmax(&self) -> usize {
        self.top_k(1)[0].0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f32;
    fn index(&self, i: usize) -> &f32 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f32>> for ProbVector {
    type Error = Error;
    fn try_from(v: Vec<f32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f32> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f32]) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::arg("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("softmax input is not finite"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(ProbVector(out))
}

/// Row softmax used on the hot path; the caller guarantees a nonempty,
/// finite slice.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &ProbVector) -> f64 {
    entropy_of(p.values().iter().map(|&v| v as f64))
}

pub(crate) fn entropy_of(values: impl Iterator<Item = f64>) -> f64 {
    let h: f64 = values.filter(|&v| v > 0.0).map(|v| -v * v.ln()).sum();
    h.max(0.0)
}

/// Kullback-Leibler divergence of `p` from the midpoint `m`, in nats.
fn kl_to_midpoint(p: &[f32], q: &[f32]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let a = a as f64;
            if a == 0.0 {
                return 0.0;
            }
            let m = (a + b as f64) * 0.5;
            a * (a / m).ln()
        })
        .sum()
}

/// Jensen-Shannon divergence in nats; symmetric and bounded by `ln 2`.
pub fn jsd(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(p.len(), q.len()));
    }
    let a = kl_to_midpoint(p.values(), q.values());
    let b = kl_to_midpoint(q.values(), p.values());
    Ok((0.5 * a + 0.5 * b).clamp(0.0, std::f64::consts::LN_2))
}

/// `1 - cos(a, b)`, with two zero vectors at distance 0 and one zero vector
/// at distance 1 from anything.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let mut ab = 0.0f64;
    let mut aa = 0.0f64;
    let mut bb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    match (aa == 0.0, bb == 0.0) {
        (true, true) => Ok(0.0),
        (true, false) | (false, true) => Ok(1.0),
        // sqrt(aa * aa) == aa exactly, so identical inputs give exactly 0.
        _ => Ok((1.0 - ab / (aa * bb).sqrt()).clamp(0.0, 2.0)),
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::arg("mean of an empty set"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.max(0.0).sqrt()))
}

/// Indices of the `k` largest values, ties broken by ascending index.
pub fn top_k_indices(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f32]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().values(), &[0.5, 0.5]);
        assert_eq!(softmax(&[42.0]).unwrap().values(), &[1.0]);
        // mpmath at 30 digits
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_65, 0.665_240_955_774_821_9];
        let got = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (g, e) in got.values().iter().zip(expected) {
            assert!((*g as f64 - e).abs() < 1e-4);
        }
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(shannon_entropy(&pv(&[1.0, 0.0, 0.0])), 0.0);
        assert!((shannon_entropy(&pv(&[0.25; 4])) - 4f64.ln()).abs() < 1e-12);
        assert!((shannon_entropy(&pv(&[0.5, 0.25, 0.25])) - 1.039_720_770_839_918).abs() < 1e-9);
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.5, 1.5]).is_err());
    }

    #[test]
    fn jsd_examples() {
        let p = pv(&[0.3, 0.7]);
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        assert!((jsd(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let v = jsd(&pv(&[0.5, 0.5]), &pv(&[1.0, 0.0])).unwrap();
        assert!((v - 0.215_761_554_338_835_7).abs() < 1e-9, "{v}");
        assert!(jsd(&pv(&[1.0]), &pv(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_distance(&[0.3, -2.0, 7.5], &[0.3, -2.0, 7.5]).unwrap(), 0.0);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert!(cosine_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn matrix_rejects_bad_input() {
        assert!(Matrix::<f32>::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::<f32>::from_vec(1, 2, vec![1.0, f32::NAN]).is_err());
        let a = Matrix::from_vec(2, 3, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = a.transpose();
        assert_eq!(a.matmul(&b).unwrap(), a.matmul_transposed(&a).unwrap());
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[2.5, -2.5]).unwrap(), (0.0, 2.5));
        assert!(mean_std(&[]).is_err());
    }

    fn dist(len: usize) -> impl Strategy<Value = ProbVector> {
        prop::collection::vec(0.0f32..10.0, len).prop_filter_map("nonzero", |v| {
            let s: f32 = v.iter().sum();
            (s > 1e-3).then(|| {
                let mut w: Vec<f32> = v.iter().map(|x| x / s).collect();
                // renormalize in f64 to stay inside the tolerance
                let t: f64 = w.iter().map(|&x| x as f64).sum();
                w.iter_mut().for_each(|x| *x = (*x as f64 / t) as f32);
                ProbVector::new(w).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            grid in prop::collection::vec(-30_000i32..30_000, 1..40),
            shift in -50i32..50,
        ) {
            // values on a 2^-10 grid so that adding the shift is exact in f32
            let v: Vec<f32> = grid.iter().map(|&g| g as f32 / 1024.0).collect();
            let c = shift as f32;
            let p = softmax(&v).unwrap();
            let sum: f64 = p.values().iter().map(|&x| x as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-5);
            let shifted: Vec<f32> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.values().iter().zip(q.values()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }

        #[test]
        fn jsd_symmetric_and_bounded((p, q) in (2usize..12).prop_flat_map(|n| (dist(n), dist(n)))) {
            let a = jsd(&p, &q).unwrap();
            prop_assert_eq!(a, jsd(&q, &p).unwrap());
            prop_assert!((0.0..=std::f64::consts::LN_2).contains(&a));
            prop_assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn entropy_bounded(p in (1usize..16).prop_flat_map(dist)) {
            let h = shannon_entropy(&p);
            prop_assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-9);
        }

        #[test]
        fn cosine_scale_invariant(
            ab in (1usize..20).prop_flat_map(|n| (
                prop::collection::vec(-5.0f32..5.0, n),
                prop::collection::vec(-5.0f32..5.0, n),
            )),
            alpha in 0.1f32..10.0,
            beta in 0.1f32..10.0,
        ) {
            let (a, b) = ab;
            let d = cosine_distance(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&d));
            let sa: Vec<f32> = a.iter().map(|x| x * alpha).collect();
            let sb: Vec<f32> = b.iter().map(|x| x * beta).collect();
            prop_assert!((cosine_distance(&sa, &sb).unwrap() - d).abs() <= 1e-6);
        }
    }

    #[test]
    fn entropy_bound_attained_only_by_uniform() {
        let n = 8;
        let uniform = ProbVector::new(vec![1.0 / n as f32; n]).unwrap();
        assert!(((n as f64).ln() - shannon_entropy(&uniform)).abs() < 1e-9);
        let mut skew = vec![1.0 / n as f32; n];
        skew[0] += 0.01;
        skew[1] -= 0.01;
        let skew = ProbVector::new(skew).unwrap();
        assert!((n as f64).ln() - shannon_entropy(&skew) > 1e-9);
    }
}
