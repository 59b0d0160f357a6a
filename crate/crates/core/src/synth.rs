//! Synthetic data: labeled shape images for desk-scale runs, and planted
//! attention patterns with density-matched noise for validating the
//! pattern tagger and the autoencoder.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::patterns::{diagonal_offsets, BinaryMatrix, ClassifierThresholds, PatternTag};

/// Shape classes of the synthetic image set; the class index is the
/// position in this list.
pub const SHAPE_CLASSES: [&str; 4] = ["rectangle", "circle", "horizontal_stripes", "vertical_stripes"];

/// Renders one `side × side` RGB8 image of the given shape class.
pub fn shape_image(class: usize, side: usize, rng: &mut impl Rng) -> Vec<u8> {
    let bg: [u8; 3] = [rng.random_range(0..90), rng.random_range(0..90), rng.random_range(0..90)];
    let fg: [u8; 3] = [
        rng.random_range(150..=255),
        rng.random_range(150..=255),
        rng.random_range(150..=255),
    ];
    let s = side as f32;
    let inside: Box<dyn Fn(usize, usize) -> bool> = match class % SHAPE_CLASSES.len() {
        0 => {
            let w = rng.random_range(0.3..0.7) * s;
            let h = rng.random_range(0.3..0.7) * s;
            let x0 = rng.random_range(0.0..(s - w));
            let y0 = rng.random_range(0.0..(s - h));
            Box::new(move |y, x| {
                let (x, y) = (x as f32, y as f32);
                x >= x0 && x < x0 + w && y >= y0 && y < y0 + h
            })
        }
        1 => {
            let r = rng.random_range(0.2..0.4) * s;
            let cx = rng.random_range(r..(s - r));
            let cy = rng.random_range(r..(s - r));
            Box::new(move |y, x| {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            })
        }
        k => {
            let period = rng.random_range(4..=(side / 4).max(4));
            let phase = rng.random_range(0..period);
            let horizontal = k == 2;
            Box::new(move |y, x| {
                let v = if horizontal { y } else { x };
                (v + phase) % period < period / 2
            })
        }
    };
    let mut out = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let c = if inside(y, x) { fg } else { bg };
            out.extend(c);
        }
    }
    out
}

/// Ground-truth kind of a planted pattern. Each diagonal offset is its own
/// kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlantedKind {
    Diagonal(i64),
    Horizontal,
    Vertical,
    Block,
}

impl PlantedKind {
    pub fn tag(self) -> PatternTag {
        match self {
            PlantedKind::Diagonal(o) => PatternTag::Diagonal(o),
            PlantedKind::Horizontal => PatternTag::Horizontal,
            PlantedKind::Vertical => PatternTag::Vertical,
            PlantedKind::Block => PatternTag::Block,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedPattern {
    pub kind: PlantedKind,
    pub grid: usize,
    pub matrix: BinaryMatrix,
}

/// Drops roughly `drop` of the set cells and sprinkles `extra · ones` random
/// cells on top.
fn perturb(m: &mut BinaryMatrix, drop: f64, extra: f64, rng: &mut impl Rng) {
    let ones: Vec<usize> = m.ones().collect();
    let n = m.side();
    for &i in &ones {
        if rng.random_bool(drop) {
            m.set(i / n, i % n, false);
        }
    }
    let add = (extra * ones.len() as f64).round() as usize;
    for _ in 0..add {
        m.set(rng.random_range(0..n), rng.random_range(0..n), true);
    }
}

fn planted(kind: PlantedKind, p: usize, rng: &mut impl Rng) -> BinaryMatrix {
    let n = p * p;
    let mut m = BinaryMatrix::zeros(n);
    match kind {
        PlantedKind::Diagonal(o) => {
            for i in 0..n as i64 {
                if (0..n as i64).contains(&(i + o)) {
                    m.set(i as usize, (i + o) as usize, true);
                }
            }
        }
        PlantedKind::Horizontal => {
            let mut rows: Vec<usize> = (0..p).collect();
            rows.shuffle(rng);
            let keep = rng.random_range(p.div_ceil(2)..=p);
            for &row in &rows[..keep] {
                for a in 0..p {
                    for b in 0..p {
                        m.set(row * p + a, row * p + b, true);
                    }
                }
            }
        }
        PlantedKind::Vertical => {
            let top = ((ClassifierThresholds::default().vertical_columns * n as f64).ceil() as usize).max(1);
            let mut cols: Vec<usize> = (0..n).collect();
            cols.shuffle(rng);
            for &c in &cols[..rng.random_range(1..=top)] {
                for r in 0..n {
                    m.set(r, c, true);
                }
            }
        }
        PlantedKind::Block => {
            // regions large enough that no handful of columns dominates
            let (lo, hi) = if p <= 4 { (2, 3.min(p)) } else { (3, 4) };
            let h = rng.random_range(lo..=hi);
            let w = rng.random_range(lo..=hi);
            let r0 = rng.random_range(0..=p - h);
            let c0 = rng.random_range(0..=p - w);
            let region: Vec<usize> = (r0..r0 + h)
                .flat_map(|r| (c0..c0 + w).map(move |c| r * p + c))
                .collect();
            for &a in &region {
                for &b in &region {
                    m.set(a, b, true);
                }
            }
        }
    }
    perturb(&mut m, 0.1, 0.05, rng);
    m
}

/// `per_kind` planted matrices for each basic pattern on a `p × p` grid.
/// The diagonal share is spread evenly over the candidate offsets.
pub fn planted_suite(p: usize, per_kind: usize, seed: u64) -> Vec<PlantedPattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets = diagonal_offsets(p);
    let mut out = Vec::with_capacity(4 * per_kind);
    for i in 0..per_kind {
        let kind = PlantedKind::Diagonal(offsets[i % offsets.len()]);
        out.push(PlantedPattern {
            kind,
            grid: p,
            matrix: planted(kind, p, &mut rng),
        });
    }
    for kind in [PlantedKind::Horizontal, PlantedKind::Vertical, PlantedKind::Block] {
        for _ in 0..per_kind {
            out.push(PlantedPattern {
                kind,
                grid: p,
                matrix: planted(kind, p, &mut rng),
            });
        }
    }
    out
}

/// A uniformly random matrix with the same side and number of ones.
pub fn density_matched_noise(like: &BinaryMatrix, rng: &mut impl Rng) -> BinaryMatrix {
    let n = like.side();
    let mut cells: Vec<usize> = (0..n * n).collect();
    cells.shuffle(rng);
    BinaryMatrix::from_ones(n, cells.into_iter().take(like.count_ones())).expect("in range")
}
