//! Pixel-budget allocation, patchification, and unified sequence assembly.
//!
//! References are rescaled under a global pixel budget, patchified into
//! tokens with their 2D cell positions, and concatenated behind the noisy
//! target as one sequence: `[target; ref_1; ...; ref_K]`. Segment ids keep
//! the references distinguishable, and `target_len` marks the output slice.

use crate::rasters::Latent;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PackingError {
    #[error("budget {budget} cannot grant {count} images one {multiple}x{multiple} cell each")]
    BudgetTooSmall {
        budget: u64,
        count: usize,
        multiple: usize,
    },
    #[error("image size {height}x{width} is not positive")]
    NonPositiveSize { height: usize, width: usize },
    #[error("token channel mismatch: sequence has {expected}, segment {segment} has {got}")]
    ChannelMismatch {
        expected: usize,
        got: usize,
        segment: usize,
    },
    #[error("output has {got} tokens, fewer than target_len {target_len}")]
    OutputTooShort { got: usize, target_len: usize },
    #[error("position ({0}, {1}) is duplicated")]
    DuplicatePosition(usize, usize),
    #[error("position ({0}, {1}) is missing")]
    MissingPosition(usize, usize),
    #[error("budget schedule invalid: {0}")]
    BadSchedule(&'static str),
}

/// Row-major token matrix plus per-token metadata for one packed sample.
#[derive(Debug, Clone)]
pub struct PackedSequence {
    /// N×channels token matrix; rows `0..target_len` belong to the target.
    pub tokens: Array2<f64>,
    /// Per-token (row, col) cell index within its own latent grid.
    pub positions: Vec<(usize, usize)>,
    /// Per-token segment id: 0 = target, k >= 1 = reference k.
    pub segments: Vec<usize>,
    /// Sequence length of the target latent (the output slice width).
    pub target_len: usize,
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    /// Number of reference segments present.
    pub fn reference_count(&self) -> usize {
        self.segments.iter().copied().max().unwrap_or(0)
    }
}

/// Progressive pixel-budget curriculum: ordered `(step_threshold, budget)`
/// stages with strictly increasing thresholds and budgets. Serialized as
/// the plain stage list; deserialization re-validates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(u64, u64)>", into = "Vec<(u64, u64)>")]
pub struct BudgetSchedule {
    stages: Vec<(u64, u64)>,
}

impl TryFrom<Vec<(u64, u64)>> for BudgetSchedule {
    type Error = PackingError;

    fn try_from(stages: Vec<(u64, u64)>) -> Result<Self, Self::Error> {
        Self::new(stages)
    }
}

impl From<BudgetSchedule> for Vec<(u64, u64)> {
    fn from(schedule: BudgetSchedule) -> Self {
        schedule.stages
    }
}

impl BudgetSchedule {
    pub fn new(stages: Vec<(u64, u64)>) -> Result<Self, PackingError> {
        if stages.is_empty() {
            return Err(PackingError::BadSchedule("at least one stage required"));
        }
        for window in stages.windows(2) {
            if window[1].0 <= window[0].0 {
                return Err(PackingError::BadSchedule(
                    "step thresholds must be strictly increasing",
                ));
            }
            if window[1].1 <= window[0].1 {
                return Err(PackingError::BadSchedule(
                    "budgets must be strictly increasing",
                ));
            }
        }
        Ok(Self { stages })
    }

    /// Desk-scale analog of the full-scale 1024²/1536²/2048² curriculum.
    pub fn desk_default() -> Self {
        Self::new(vec![(0, 64 * 64), (10_000, 96 * 96), (20_000, 128 * 128)])
            .expect("static schedule is valid")
    }

    pub fn stages(&self) -> &[(u64, u64)] {
        &self.stages
    }

    /// Budget of the last stage whose threshold is <= step; the first
    /// stage's budget before any threshold is reached.
    pub fn budget_at(&self, step: u64) -> u64 {
        let mut budget = self.stages[0].1;
        for &(threshold, b) in &self.stages {
            if threshold <= step {
                budget = b;
            }
        }
        budget
    }
}

fn floor_to_multiple(v: f64, multiple: usize) -> usize {
    ((v / multiple as f64).floor() as usize) * multiple
}

fn allocation_at_scale(sizes: &[(usize, usize)], scale: f64, multiple: usize) -> Vec<(usize, usize)> {
    sizes
        .iter()
        .map(|&(h, w)| {
            let nh = floor_to_multiple(scale * h as f64, multiple).max(multiple);
            let nw = floor_to_multiple(scale * w as f64, multiple).max(multiple);
            (nh, nw)
        })
        .collect()
}

fn total_pixels(dims: &[(usize, usize)]) -> u64 {
    dims.iter().map(|&(h, w)| (h as u64) * (w as u64)).sum()
}

/// Rescale every image by the shared factor `sqrt(budget / sum(H*W))`, then
/// floor each side to the alignment multiple, keeping at least one
/// multiple×multiple cell per image.
///
/// When the per-image minimum would push the total over the budget (tiny
/// images pinned at the floor while large ones keep their share), the scale
/// is bisected down to the largest factor that fits; the budget bound always
/// holds on return.
pub fn allocate_budget(
    sizes: &[(usize, usize)],
    budget: u64,
    multiple: usize,
) -> Result<Vec<(usize, usize)>, PackingError> {
    assert!(multiple > 0, "multiple must be positive");
    if sizes.is_empty() {
        return Ok(Vec::new());
    }
    for &(h, w) in sizes {
        if h == 0 || w == 0 {
            return Err(PackingError::NonPositiveSize {
                height: h,
                width: w,
            });
        }
    }
    let min_needed = (sizes.len() as u64) * (multiple as u64) * (multiple as u64);
    if budget < min_needed {
        return Err(PackingError::BudgetTooSmall {
            budget,
            count: sizes.len(),
            multiple,
        });
    }

    let sum_hw: u64 = sizes.iter().map(|&(h, w)| (h as u64) * (w as u64)).sum();
    let scale = (budget as f64 / sum_hw as f64).sqrt();
    let dims = allocation_at_scale(sizes, scale, multiple);
    if total_pixels(&dims) <= budget {
        return Ok(dims);
    }

    // The minimum-cell clamp overflowed the budget; bisect the scale down.
    // lo is always feasible: at scale 0 every image sits at the minimum cell
    // and the precondition guarantees K * multiple^2 <= budget.
    let mut lo = 0.0f64;
    let mut hi = scale;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total_pixels(&allocation_at_scale(sizes, mid, multiple)) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(allocation_at_scale(sizes, lo, multiple))
}

/// Flatten a latent grid into row-major tokens with (row, col) positions.
pub fn patchify(latent: &Latent) -> (Array2<f64>, Vec<(usize, usize)>) {
    let (rows, cols, channels) = latent.values.dim();
    let tokens = latent
        .values
        .to_shape((rows * cols, channels))
        .expect("row-major latent reshapes to (N, C)")
        .to_owned();
    let mut positions = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            positions.push((r, c));
        }
    }
    (tokens, positions)
}

/// Rebuild a latent grid from position-keyed tokens. Requires exactly the
/// full rows×cols grid of positions, in any order.
pub fn unpatchify(
    tokens: &Array2<f64>,
    positions: &[(usize, usize)],
    rows: usize,
    cols: usize,
) -> Result<Latent, PackingError> {
    assert_eq!(tokens.nrows(), positions.len());
    let channels = tokens.ncols();
    let mut latent = Latent::zeros(rows, cols, channels);
    let mut seen = vec![false; rows * cols];
    for (i, &(r, c)) in positions.iter().enumerate() {
        if r >= rows || c >= cols || seen[r * cols + c] {
            return Err(PackingError::DuplicatePosition(r, c));
        }
        seen[r * cols + c] = true;
        for ch in 0..channels {
            latent.values[(r, c, ch)] = tokens[(i, ch)];
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(PackingError::MissingPosition(
            missing / cols,
            missing % cols,
        ));
    }
    Ok(latent)
}

/// One patchified latent: tokens plus their grid positions.
pub type TokenGrid = (Array2<f64>, Vec<(usize, usize)>);

/// Concatenate `[target; ref_1; ...; ref_K]` into one packed sequence with
/// segment ids `0, 1, ..., K`. Accepts any K >= 0.
pub fn assemble(target: &TokenGrid, references: &[TokenGrid]) -> Result<PackedSequence, PackingError> {
    let channels = target.0.ncols();
    for (k, (tokens, _)) in references.iter().enumerate() {
        if tokens.ncols() != channels {
            return Err(PackingError::ChannelMismatch {
                expected: channels,
                got: tokens.ncols(),
                segment: k + 1,
            });
        }
    }
    let target_len = target.0.nrows();
    let total: usize = target_len + references.iter().map(|(t, _)| t.nrows()).sum::<usize>();
    let mut tokens = Array2::zeros((total, channels));
    let mut positions = Vec::with_capacity(total);
    let mut segments = Vec::with_capacity(total);

    let mut row = 0;
    for (seg, (seg_tokens, seg_positions)) in std::iter::once(target)
        .chain(references.iter())
        .enumerate()
    {
        debug_assert_eq!(seg_tokens.nrows(), seg_positions.len());
        for i in 0..seg_tokens.nrows() {
            tokens.row_mut(row).assign(&seg_tokens.row(i));
            positions.push(seg_positions[i]);
            segments.push(seg);
            row += 1;
        }
    }
    Ok(PackedSequence {
        tokens,
        positions,
        segments,
        target_len,
    })
}

/// First `target_len` rows of a model output, order preserved.
pub fn slice_target(output: &Array2<f64>, target_len: usize) -> Result<Array2<f64>, PackingError> {
    if output.nrows() < target_len {
        return Err(PackingError::OutputTooShort {
            got: output.nrows(),
            target_len,
        });
    }
    Ok(output.slice(ndarray::s![..target_len, ..]).to_owned())
}
