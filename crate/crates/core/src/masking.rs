//! Block-wise context/target sampling over a patch grid.
//!
//! One large context block and `k` smaller target blocks are drawn; every
//! target patch is then removed from the context so nothing the predictor
//! must recover is visible to it.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Number of whole-mask attempts (and per-block disjointness retries)
/// before giving up.
pub const RESAMPLE_BUDGET: usize = 100;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MaskError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("no valid mask after {attempts} attempts")]
    ResampleExhausted { attempts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self, MaskError> {
        if rows == 0 || cols == 0 {
            return Err(MaskError::InvalidConfig(format!("grid {rows}×{cols} is empty")));
        }
        Ok(Self { rows, cols })
    }

    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    /// Raster index to `(row, col)`.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.cols, i % self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// A sampled block together with the scale and aspect it was drawn with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawnBlock {
    #[serde(flatten)]
    pub block: BlockSpec,
    pub scale: f64,
    pub aspect: f64,
}

/// Closed interval `[lo, hi]`; serialised as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn check(&self, name: &str) -> Result<(), MaskError> {
        if !(self.lo > 0.0 && self.lo <= self.hi && self.hi.is_finite()) {
            return Err(MaskError::InvalidConfig(format!(
                "{name} interval ({}, {}) must be nonempty with positive endpoints",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

impl From<[f64; 2]> for Interval {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<Interval> for [f64; 2] {
    fn from(i: Interval) -> Self {
        [i.lo, i.hi]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub k: usize,
    pub target_scale: Interval,
    pub target_aspect: Interval,
    pub context_scale: Interval,
    pub context_aspect: Interval,
    pub allow_overlap: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 4,
            target_scale: Interval::new(0.15, 0.20),
            target_aspect: Interval::new(0.75, 1.5),
            context_scale: Interval::new(0.85, 1.0),
            context_aspect: Interval::new(0.75, 1.5),
            allow_overlap: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        if self.k == 0 {
            return Err(MaskError::InvalidConfig("k must be at least 1".into()));
        }
        self.target_scale.check("target_scale")?;
        self.target_aspect.check("target_aspect")?;
        self.context_scale.check("context_scale")?;
        self.context_aspect.check("context_aspect")?;
        if self.target_scale.hi > 1.0 || self.context_scale.hi > 1.0 {
            return Err(MaskError::InvalidConfig("scales must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Sampled context and target index sets, all sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub grid: PatchGrid,
    pub context: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
    pub target_union: Vec<usize>,
    pub context_block: DrawnBlock,
    pub target_blocks: Vec<DrawnBlock>,
}

impl MaskSpec {
    /// Block ids (indices into `targets`) containing `patch`.
    pub fn membership(&self, patch: usize) -> BTreeSet<usize> {
        self.targets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.binary_search(&patch).is_ok())
            .map(|(j, _)| j)
            .collect()
    }
}

/// Clamped block extent for a given scale and aspect ratio.
pub fn block_dims(grid: PatchGrid, scale: f64, aspect: f64) -> (usize, usize) {
    let n = grid.n() as f64;
    let h = ((scale * n * aspect).sqrt().round() as usize).clamp(1, grid.rows);
    let w = ((scale * n / aspect).sqrt().round() as usize).clamp(1, grid.cols);
    (h, w)
}

/// Draws a block of the given scale and aspect at a uniform position.
pub fn sample_block(grid: PatchGrid, scale: f64, aspect: f64, rng: &mut impl Rng) -> BlockSpec {
    debug_assert!(scale > 0.0 && scale <= 1.0 && aspect > 0.0);
    let (height, width) = block_dims(grid, scale, aspect);
    let top = rng.random_range(0..=grid.rows - height);
    let left = rng.random_range(0..=grid.cols - width);
    BlockSpec {
        top,
        left,
        height,
        width,
    }
}

/// Raster indices covered by `b`, ascending.
pub fn block_indices(b: &BlockSpec, grid: PatchGrid) -> Vec<usize> {
    let mut out = Vec::with_capacity(b.height * b.width);
    for r in b.top..b.top + b.height {
        for c in b.left..b.left + b.width {
            out.push(r * grid.cols + c);
        }
    }
    out
}

fn draw(grid: PatchGrid, scale: f64, aspect: &Interval, rng: &mut impl Rng) -> DrawnBlock {
    let aspect = aspect.sample(rng);
    DrawnBlock {
        block: sample_block(grid, scale, aspect, rng),
        scale,
        aspect,
    }
}

/// Samples a context block and `cfg.k` target blocks, then removes every
/// target patch from the context.
pub fn sample_mask(grid: PatchGrid, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<MaskSpec, MaskError> {
    cfg.validate()?;
    'attempt: for _ in 0..RESAMPLE_BUDGET {
        let scale = cfg.target_scale.sample(rng);
        let mut target_blocks = Vec::with_capacity(cfg.k);
        let mut targets: Vec<Vec<usize>> = Vec::with_capacity(cfg.k);
        let mut taken = BTreeSet::new();
        for _ in 0..cfg.k {
            let mut placed = false;
            for _ in 0..RESAMPLE_BUDGET {
                let drawn = draw(grid, scale, &cfg.target_aspect, rng);
                let idx = block_indices(&drawn.block, grid);
                if cfg.allow_overlap || idx.iter().all(|i| !taken.contains(i)) {
                    taken.extend(idx.iter().copied());
                    targets.push(idx);
                    target_blocks.push(drawn);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'attempt;
            }
        }

        let cscale = cfg.context_scale.sample(rng);
        let context_block = draw(grid, cscale, &cfg.context_aspect, rng);
        let context: Vec<usize> = block_indices(&context_block.block, grid)
            .into_iter()
            .filter(|i| !taken.contains(i))
            .collect();
        if context.is_empty() {
            continue;
        }
        return Ok(MaskSpec {
            grid,
            context,
            targets,
            target_union: taken.into_iter().collect(),
            context_block,
            target_blocks,
        });
    }
    Err(MaskError::ResampleExhausted {
        attempts: RESAMPLE_BUDGET,
    })
}
