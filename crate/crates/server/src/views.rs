//! Pure shaping of cached records into response bodies.

use serde::{Deserialize, Serialize};
use vitlens_core::numerics::{top_k_indices, Matrix};
use vitlens_core::patterns::top_fraction_count;

pub const ATTENTION_HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub value: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub min: f32,
    pub max: f32,
    pub counts: Vec<u32>,
}

/// The `round(topfrac · cells)` largest entries of `a`, ties toward the lower
/// row-major index, returned in row-major order.
pub fn top_cells(a: &Matrix, topfrac: f64) -> Vec<Cell> {
    let k = top_fraction_count(a.data().len(), topfrac);
    let mut idx = top_k_indices(a.data(), k);
    idx.sort_unstable();
    idx.into_iter()
        .map(|i| Cell {
            row: i / a.cols(),
            col: i % a.cols(),
            value: a.data()[i],
        })
        .collect()
}

/// Uniform bins on `[min, max]` of the values; the maximum lands in the last
/// bin and a constant input fills the first.
pub fn histogram(values: &[f32], bins: usize) -> Histogram {
    let mut counts = vec![0u32; bins];
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if values.is_empty() || bins == 0 {
        return Histogram { min: 0.0, max: 0.0, counts };
    }
    let width = (max - min) as f64;
    for &v in values {
        let bin = if width > 0.0 {
            (((v - min) as f64 / width * bins as f64) as usize).min(bins - 1)
        } else {
            0
        };
        counts[bin] += 1;
    }
    Histogram { min, max, counts }
}

/// Rows of a matrix as nested vectors.
pub fn grid_rows(m: &Matrix) -> Vec<Vec<f32>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_cells_counts_and_ties() {
        let a = Matrix::from_vec(2, 2, vec![0.5, 0.5, 0.1, 0.5]).unwrap();
        let two = top_cells(&a, 0.5);
        assert_eq!(two.iter().map(|c| (c.row, c.col)).collect::<Vec<_>>(), [(0, 0), (0, 1)]);
        assert_eq!(top_cells(&a, 1.0).len(), 4);
        assert!(top_cells(&a, 0.0).is_empty());
        // 0.3 · 4 = 1.2 rounds to one cell
        assert_eq!(top_cells(&a, 0.3).len(), 1);
    }

    #[test]
    fn histogram_edges() {
        let h = histogram(&[0.0, 0.5, 1.0, 1.0], 4);
        assert_eq!(h.counts, [1, 0, 1, 2]);
        assert_eq!((h.min, h.max), (0.0, 1.0));
        let flat = histogram(&[0.2; 3], 5);
        assert_eq!(flat.counts, [3, 0, 0, 0, 0]);
        assert_eq!(histogram(&[], 3).counts, [0, 0, 0]);
    }
}
