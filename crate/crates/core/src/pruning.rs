//! Region masks over a head's attention matrix and the six pruning modes.
//!
//! The `(1+p²)²` matrix splits into CLS→CLS, CLS↔patches (both strips
//! taken together) and patches→patches. Modes:
//!
//! | mode | zeroed region                      |
//! |------|------------------------------------|
//! | 0    | nothing                            |
//! | 1    | the whole matrix                   |
//! | 2    | CLS→CLS                            |
//! | 3    | CLS→patches and patches→CLS        |
//! | 4    | patches→patches                    |
//! | 5    | every CLS-related cell (2 ∪ 3)     |

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::vit::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PruneMode {
    None = 0,
    Full = 1,
    ClsSelf = 2,
    ClsPatch = 3,
    PatchPatch = 4,
    ClsAll = 5,
}

impl PruneMode {
    pub const ALL: [PruneMode; 6] = [
        PruneMode::None,
        PruneMode::Full,
        PruneMode::ClsSelf,
        PruneMode::ClsPatch,
        PruneMode::PatchPatch,
        PruneMode::ClsAll,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for PruneMode {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        PruneMode::ALL
            .get(v as usize)
            .copied()
            .ok_or_else(|| Error::arg(format!("prune mode {v} out of range 0..=5")))
    }
}

impl From<PruneMode> for u8 {
    fn from(m: PruneMode) -> u8 {
        m as u8
    }
}

/// Which head to prune and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PruneSpec {
    pub layer: usize,
    pub head: usize,
    pub mode: PruneMode,
}

impl PruneSpec {
    pub fn new(layer: usize, head: usize, mode: PruneMode) -> Self {
        Self { layer, head, mode }
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.layers || self.head >= config.heads {
            return Err(Error::arg(format!(
                "prune target ({}, {}) outside {} layers x {} heads",
                self.layer, self.head, config.layers, config.heads
            )));
        }
        Ok(())
    }
}

/// Boolean `(1+p²)²` mask; `true` cells are zeroed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    side: usize,
    cells: Vec<bool>,
}

impl RegionMask {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn is_masked(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.side + c]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    fn build(mode: PruneMode, p: usize) -> Self {
        let side = 1 + p * p;
        let cls_self = |r: usize, c: usize| r == 0 && c == 0;
        let cls_patch = |r: usize, c: usize| (r == 0) != (c == 0);
        let patch_patch = |r: usize, c: usize| r > 0 && c > 0;
        let mut cells = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                cells.push(match mode {
                    PruneMode::None => false,
                    PruneMode::Full => true,
                    PruneMode::ClsSelf => cls_self(r, c),
                    PruneMode::ClsPatch => cls_patch(r, c),
                    PruneMode::PatchPatch => patch_patch(r, c),
                    PruneMode::ClsAll => cls_self(r, c) || cls_patch(r, c),
                });
            }
        }
        Self { side, cells }
    }
}

type MaskTable = Mutex<HashMap<(PruneMode, usize), Arc<RegionMask>>>;

/// Mask for `mode` on a `p × p` patch grid, built once per `(mode, p)`.
pub fn region_mask(mode: PruneMode, p: usize) -> Arc<RegionMask> {
    static TABLE: OnceLock<MaskTable> = OnceLock::new();
    let table = TABLE.get_or_init(Default::default);
    let mut table = table.lock().expect("mask table poisoned");
    table
        .entry((mode, p))
        .or_insert_with(|| Arc::new(RegionMask::build(mode, p)))
        .clone()
}

/// Returns a copy of `a` with every masked cell set to zero.
pub fn apply_prune(a: &Matrix, mask: &RegionMask) -> Result<Matrix> {
    if a.rows() != mask.side || a.cols() != mask.side {
        return Err(Error::shape(
            format!("{0}x{0}", mask.side),
            format!("{}x{}", a.rows(), a.cols()),
        ));
    }
    let mut out = a.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(&mask.cells) {
        if m {
            *v = 0.0;
        }
    }
    Ok(out)
}
