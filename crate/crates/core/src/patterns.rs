//! Attention-pattern extraction: splitting a head's matrix into its
//! CLS-related part and patch part, top-fraction binarization, a rule-based
//! tagger for the basic patterns, and source/target attention masks.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{top_k_indices, Matrix};

/// Top 1% of cells kept by default.
pub const DEFAULT_BINARIZE_RATIO: f64 = 0.01;

fn grid_of(tokens_or_patches: usize) -> Option<usize> {
    let p = (tokens_or_patches as f64).sqrt().round() as usize;
    (p * p == tokens_or_patches && p > 0).then_some(p)
}

/// Splits `A` into `a_cls = A[0, :] ++ A[1:, 0]` (length `2p²+1`) and
/// `a_patch = A[1:, 1:]`.
pub fn split_attention(a: &Matrix) -> Result<(Vec<f32>, Matrix)> {
    let t = a.rows();
    if t < 2 || a.cols() != t || grid_of(t - 1).is_none() {
        return Err(Error::shape("(1+p²) x (1+p²)", format!("{:?}", a.shape())));
    }
    let mut a_cls = a.row(0).to_vec();
    a_cls.extend((1..t).map(|r| a.get(r, 0)));
    Ok((a_cls, a.submatrix(1, 1, t - 1, t - 1)))
}

/// Inverse of [`split_attention`].
pub fn merge_attention(a_cls: &[f32], a_patch: &Matrix) -> Result<Matrix> {
    let n = a_patch.rows();
    if a_patch.cols() != n || a_cls.len() != 2 * n + 1 {
        return Err(Error::shape(
            format!("a_cls of {} and square a_patch", 2 * n + 1),
            format!("a_cls {}, a_patch {:?}", a_cls.len(), a_patch.shape()),
        ));
    }
    Ok(Matrix::from_fn(n + 1, n + 1, |r, c| match (r, c) {
        (0, c) => a_cls[c],
        (r, 0) => a_cls[n + r],
        (r, c) => a_patch.get(r - 1, c - 1),
    }))
}

/// Square 0/1 matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "BinaryRepr", try_from = "BinaryRepr")]
pub struct BinaryMatrix {
    side: usize,
    bits: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct BinaryRepr {
    side: usize,
    ones: Vec<u32>,
}

impl From<BinaryMatrix> for BinaryRepr {
    fn from(b: BinaryMatrix) -> Self {
        BinaryRepr {
            side: b.side,
            ones: b.ones().map(|i| i as u32).collect(),
        }
    }
}

impl TryFrom<BinaryRepr> for BinaryMatrix {
    type Error = Error;
    fn try_from(r: BinaryRepr) -> Result<Self> {
        Self::from_ones(r.side, r.ones.into_iter().map(|i| i as usize))
    }
}

impl BinaryMatrix {
    pub fn zeros(side: usize) -> Self {
        Self {
            side,
            bits: vec![false; side * side],
        }
    }

    pub fn from_ones(side: usize, ones: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut m = Self::zeros(side);
        for i in ones {
            if i >= side * side {
                return Err(Error::arg(format!("cell {i} outside a {side}x{side} matrix")));
            }
            m.bits[i] = true;
        }
        Ok(m)
    }

    /// Accepts only exact 0/1 values.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::shape("square matrix", format!("{:?}", m.shape())));
        }
        let bits = m
            .data()
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                v => Err(Error::arg(format!("non-binary value {v}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        Ok(Self { side: m.rows(), bits })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.side + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.side + c] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Flat row-major indices of the set cells.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_matrix<T: num_traits::Float>(&self) -> Matrix<T> {
        Matrix::from_fn(self.side, self.side, |r, c| {
            if self.get(r, c) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Keeps the `round(ratio · cells)` largest entries as ones, ties resolved
/// toward the lower row-major index.
pub fn binarize(a_patch: &Matrix, ratio: f64) -> Result<BinaryMatrix> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::arg(format!("binarize ratio {ratio} not in (0, 1]")));
    }
    if a_patch.rows() != a_patch.cols() {
        return Err(Error::shape("square matrix", format!("{:?}", a_patch.shape())));
    }
    let k = top_fraction_count(a_patch.data().len(), ratio);
    BinaryMatrix::from_ones(a_patch.rows(), top_k_indices(a_patch.data(), k))
}

/// `round(ratio · cells)`.
pub fn top_fraction_count(cells: usize, ratio: f64) -> usize {
    ((ratio * cells as f64).round() as usize).min(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatternTag {
    /// Each patch attends to the patch `offset` positions away in the
    /// sequence: 0 is self-attention, ±1 left/right, ±p above/below.
    Diagonal(i64),
    Horizontal,
    Vertical,
    Block,
}

impl fmt::Display for PatternTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatternTag::Diagonal(0) => f.write_str("diagonal:0"),
            PatternTag::Diagonal(o) => write!(f, "diagonal:{o:+}"),
            PatternTag::Horizontal => f.write_str("horizontal"),
            PatternTag::Vertical => f.write_str("vertical"),
            PatternTag::Block => f.write_str("block"),
        }
    }
}

impl FromStr for PatternTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horizontal" => Ok(PatternTag::Horizontal),
            "vertical" => Ok(PatternTag::Vertical),
            "block" => Ok(PatternTag::Block),
            _ => s
                .strip_prefix("diagonal:")
                .and_then(|o| o.trim_start_matches('+').parse().ok())
                .map(PatternTag::Diagonal)
                .ok_or_else(|| Error::arg(format!("unknown pattern tag `{s}`"))),
        }
    }
}

impl Serialize for PatternTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PatternTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierThresholds {
    /// Minimum fraction of a diagonal's cells that must be set.
    pub diagonal_coverage: f64,
    /// Minimum fraction of unclaimed ones lying within one patch row.
    pub horizontal_fraction: f64,
    /// Share of columns (of `p²`) examined for the vertical test.
    pub vertical_columns: f64,
    /// Minimum share of ones held by those columns.
    pub vertical_mass: f64,
    /// Minimum `|B ∧ Bᵀ| / |B|` for a block.
    pub block_symmetry: f64,
    /// Ones claimed by detected diagonals at or above this share rule out a
    /// block.
    pub diagonal_dominance: f64,
}

impl Default for ClassifierThresholds {
    fn default() -> Self {
        Self {
            diagonal_coverage: 0.6,
            horizontal_fraction: 0.6,
            vertical_columns: 0.05,
            vertical_mass: 0.6,
            block_symmetry: 0.5,
            diagonal_dominance: 0.5,
        }
    }
}

/// Candidate diagonal offsets for a `p × p` grid: self, left/right,
/// above/below.
pub fn diagonal_offsets(p: usize) -> Vec<i64> {
    let p = p as i64;
    let mut v = vec![-p, -1, 0, 1, p];
    v.sort_unstable();
    v.dedup();
    v
}

/// Fraction of valid cells `(i, i+offset)` that are set.
pub fn diagonal_coverage(bin: &BinaryMatrix, offset: i64) -> f64 {
    let n = bin.side() as i64;
    let valid: Vec<i64> = (0..n).filter(|i| (0..n).contains(&(i + offset))).collect();
    if valid.is_empty() {
        return 0.0;
    }
    let hits = valid
        .iter()
        .filter(|&&i| bin.get(i as usize, (i + offset) as usize))
        .count();
    hits as f64 / valid.len() as f64
}

/// Tags a binarized `p² × p²` patch matrix with the basic patterns it
/// contains. A matrix may carry several tags, or none.
pub fn classify_pattern(bin: &BinaryMatrix, t: &ClassifierThresholds) -> Result<BTreeSet<PatternTag>> {
    let n = bin.side();
    let p = grid_of(n).ok_or_else(|| Error::shape("p² x p² patch matrix", format!("{n}x{n}")))?;
    let mut tags = BTreeSet::new();
    let total = bin.count_ones();
    if total == 0 {
        return Ok(tags);
    }

    let diagonals: Vec<i64> = diagonal_offsets(p)
        .into_iter()
        .filter(|&o| diagonal_coverage(bin, o) >= t.diagonal_coverage)
        .collect();
    tags.extend(diagonals.iter().map(|&o| PatternTag::Diagonal(o)));
    let claimed = |r: usize, c: usize| diagonals.contains(&(c as i64 - r as i64));

    let mut unclaimed = 0usize;
    let mut same_row = 0usize;
    let mut on_diagonal = 0usize;
    let mut symmetric = 0usize;
    let mut column_mass = vec![0usize; n];
    for idx in bin.ones() {
        let (r, c) = (idx / n, idx % n);
        column_mass[c] += 1;
        if bin.get(c, r) {
            symmetric += 1;
        }
        if claimed(r, c) {
            on_diagonal += 1;
        } else {
            unclaimed += 1;
            if r / p == c / p {
                same_row += 1;
            }
        }
    }

    if unclaimed > 0 && same_row as f64 >= t.horizontal_fraction * unclaimed as f64 {
        tags.insert(PatternTag::Horizontal);
    }

    column_mass.sort_unstable_by(|a, b| b.cmp(a));
    let top = ((t.vertical_columns * n as f64).ceil() as usize).clamp(1, n);
    let top_mass: usize = column_mass[..top].iter().sum();
    let vertical = top_mass as f64 >= t.vertical_mass * total as f64;
    if vertical {
        tags.insert(PatternTag::Vertical);
    }

    let diagonal_dominated = on_diagonal as f64 >= t.diagonal_dominance * total as f64;
    if symmetric as f64 >= t.block_symmetry * total as f64 && !vertical && !diagonal_dominated {
        tags.insert(PatternTag::Block);
    }
    Ok(tags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// The token attending: a row of `A`.
    Source,
    /// The token attended: a column of `A`.
    Target,
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Direction::Source),
            "target" => Ok(Direction::Target),
            _ => Err(Error::arg(format!("direction `{s}` is not source|target"))),
        }
    }
}

/// Reshapes one token's attention over the patches into a `p × p` grid.
/// Token 0 is the class token.
pub fn attention_mask(a: &Matrix, token: usize, direction: Direction) -> Result<Matrix> {
    let t = a.rows();
    let p = (t > 1 && a.cols() == t)
        .then(|| grid_of(t - 1))
        .flatten()
        .ok_or_else(|| Error::shape("(1+p²) x (1+p²)", format!("{:?}", a.shape())))?;
    if token >= t {
        return Err(Error::arg(format!("token {token} outside 0..{t}")));
    }
    Ok(Matrix::from_fn(p, p, |r, c| {
        let patch = 1 + r * p + c;
        match direction {
            Direction::Source => a.get(token, patch),
            Direction::Target => a.get(patch, token),
        }
    }))
}
