//! Exact rule-based judge for synthetic shape tasks.
//!
//! Ground-truth composition specs make an oracle possible: the expected
//! element layout is derived from the references plus the instruction, and
//! the candidate is scored on detection (integration), fidelity of the
//! detected elements (consistency), and cleanliness of everything else
//! (quality). Deterministic by construction.

use super::{Judge, JudgeKind, RewardBreakdown, RewardError, RewardWeights};
use crate::backbone::{CellId, EditAction, Instruction};
use crate::rasters::RasterImage;
use crate::taskgen::{BACKGROUND, PALETTE};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Largest possible RGB distance (black to white).
const MAX_DIST: f64 = 441.6729559300637;

/// Thresholds and weights of the programmatic rubric.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    /// Euclidean RGB radius within which a pixel matches an element color.
    pub tau_color: f64,
    /// Fraction of the element's pixel count required for detection.
    pub tau_area_fraction: f64,
    /// Canonical background color.
    pub background: [u8; 3],
    pub weights: RewardWeights,
    /// Versioned rubric tag recorded with every remote request.
    pub rubric_version: String,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            tau_color: 60.0,
            tau_area_fraction: 0.25,
            background: BACKGROUND,
            weights: RewardWeights::default(),
            rubric_version: "shape-rubric/1".to_string(),
        }
    }
}

/// One element the candidate is expected to show.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedElement {
    pub cell: CellId,
    pub color: [u8; 3],
    pub pixel_count: usize,
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    (0..3)
        .map(|i| {
            let d = a[i] as f64 - b[i] as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Quadrant bounds of a cell on an h×w canvas: (rows, cols) half-open.
fn cell_bounds(cell: CellId, h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let (hm, wm) = (h / 2, w / 2);
    match cell {
        CellId::TopLeft => (0..hm, 0..wm),
        CellId::TopRight => (0..hm, wm..w),
        CellId::BottomLeft => (hm..h, 0..wm),
        CellId::BottomRight => (hm..h, wm..w),
    }
}

/// Modal non-background color and pixel count within a region.
fn detect_element(
    image: &RasterImage,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    background: [u8; 3],
    tau_color: f64,
) -> Option<([u8; 3], usize)> {
    let mut counts: BTreeMap<[u8; 3], usize> = BTreeMap::new();
    for r in rows {
        for c in cols.clone() {
            let px = image.get(r, c);
            if color_distance(px, background) > tau_color {
                *counts.entry(px).or_insert(0) += 1;
            }
        }
    }
    let total: usize = counts.values().sum();
    let modal = counts.into_iter().max_by_key(|&(_, n)| n)?;
    Some((modal.0, total)).filter(|&(_, n)| n > 4)
}

/// Derive the element layout the candidate must show: PLACE directives read
/// their element from the directive's own reference; editing directives
/// start from the reference scene and transform it.
pub fn expected_layout(
    references: &[RasterImage],
    instruction: &Instruction,
    config: &JudgeConfig,
) -> Result<Vec<ExpectedElement>, RewardError> {
    if references.is_empty() {
        return Err(RewardError::NoReferences);
    }
    let directives = instruction.directives();
    let compose = directives.iter().any(|d| d.action == EditAction::Place);

    if compose {
        let mut expected = Vec::with_capacity(directives.len());
        for d in directives {
            let reference = references
                .get(d.ref_index - 1)
                .ok_or(RewardError::EmptyReference(d.ref_index))?;
            let (color, pixel_count) = detect_element(
                reference,
                0..reference.height(),
                0..reference.width(),
                config.background,
                config.tau_color,
            )
            .ok_or(RewardError::EmptyReference(d.ref_index))?;
            expected.push(ExpectedElement {
                cell: d.cell,
                color,
                pixel_count,
            });
        }
        return Ok(expected);
    }

    // Editing: reconstruct the scene shown by reference 1, then apply the
    // directives to it.
    let scene_ref = &references[0];
    let mut scene: BTreeMap<usize, ExpectedElement> = BTreeMap::new();
    for cell in CellId::ALL {
        let (rows, cols) = cell_bounds(cell, scene_ref.height(), scene_ref.width());
        if let Some((color, pixel_count)) =
            detect_element(scene_ref, rows, cols, config.background, config.tau_color)
        {
            scene.insert(
                cell.index(),
                ExpectedElement {
                    cell,
                    color,
                    pixel_count,
                },
            );
        }
    }
    for d in directives {
        match d.action {
            EditAction::Place => unreachable!("handled above"),
            EditAction::Recolor { to } => {
                if let Some(element) = scene.get_mut(&d.cell.index()) {
                    element.color = PALETTE[to];
                }
            }
            EditAction::Move { to } => {
                if let Some(mut element) = scene.remove(&d.cell.index()) {
                    element.cell = to;
                    scene.insert(to.index(), element);
                }
            }
            EditAction::Remove => {
                scene.remove(&d.cell.index());
            }
        }
    }
    Ok(scene.into_values().collect())
}

/// Score a candidate against the expected layout; all three dimensions are
/// in [0, 10] and the ground-truth target scores (10, 10, 10).
pub fn judge_programmatic(
    references: &[RasterImage],
    instruction: &Instruction,
    candidate: &RasterImage,
    config: &JudgeConfig,
) -> Result<RewardBreakdown, RewardError> {
    if references.is_empty() {
        return Err(RewardError::NoReferences);
    }
    let want = &references[0];
    if candidate.height() != want.height() || candidate.width() != want.width() {
        return Err(RewardError::DimensionMismatch {
            got_h: candidate.height(),
            got_w: candidate.width(),
            want_h: want.height(),
            want_w: want.width(),
        });
    }
    let expected = expected_layout(references, instruction, config)?;

    if expected.is_empty() {
        // Nothing to integrate or preserve; only cleanliness is scored.
        let quality = quality_score(candidate, &expected, config);
        let breakdown =
            RewardBreakdown::new(10.0, 10.0, quality, None, &config.weights)?;
        return Ok(breakdown);
    }

    let mut detected = 0usize;
    let mut consistency_errors = Vec::new();
    for element in &expected {
        let (rows, cols) = cell_bounds(element.cell, candidate.height(), candidate.width());
        let mut matched = 0usize;
        let mut sum = [0.0f64; 3];
        for r in rows {
            for c in cols.clone() {
                let px = candidate.get(r, c);
                if color_distance(px, element.color) <= config.tau_color {
                    matched += 1;
                    for ch in 0..3 {
                        sum[ch] += px[ch] as f64;
                    }
                }
            }
        }
        let needed = (config.tau_area_fraction * element.pixel_count as f64).ceil() as usize;
        if matched >= needed.max(1) {
            detected += 1;
            let mean = [
                (sum[0] / matched as f64).round() as i64,
                (sum[1] / matched as f64).round() as i64,
                (sum[2] / matched as f64).round() as i64,
            ];
            let mean_u8 = [
                mean[0].clamp(0, 255) as u8,
                mean[1].clamp(0, 255) as u8,
                mean[2].clamp(0, 255) as u8,
            ];
            let color_err = color_distance(mean_u8, element.color) / MAX_DIST;
            let size_err = (matched as f64 - element.pixel_count as f64).abs()
                / (matched.max(element.pixel_count) as f64);
            consistency_errors.push(0.5 * color_err + 0.5 * size_err);
        }
    }

    let integration = 10.0 * detected as f64 / expected.len() as f64;
    let consistency = if consistency_errors.is_empty() {
        0.0
    } else {
        let mean_err =
            consistency_errors.iter().sum::<f64>() / consistency_errors.len() as f64;
        10.0 * (1.0 - mean_err).clamp(0.0, 1.0)
    };
    let quality = quality_score(candidate, &expected, config);
    RewardBreakdown::new(integration, consistency, quality, None, &config.weights)
}

/// Cleanliness of the pixels outside every expected cell: mean normalized
/// deviation from the canonical background, mapped to [0, 10].
fn quality_score(
    candidate: &RasterImage,
    expected: &[ExpectedElement],
    config: &JudgeConfig,
) -> f64 {
    let mut in_cell = [false; 4];
    for element in expected {
        in_cell[element.cell.index()] = true;
    }
    let mut total_dev = 0.0;
    let mut count = 0usize;
    for cell in CellId::ALL {
        if in_cell[cell.index()] {
            continue;
        }
        let (rows, cols) = cell_bounds(cell, candidate.height(), candidate.width());
        for r in rows {
            for c in cols.clone() {
                total_dev += color_distance(candidate.get(r, c), config.background) / MAX_DIST;
                count += 1;
            }
        }
    }
    if count == 0 {
        return 10.0;
    }
    10.0 * (1.0 - total_dev / count as f64).clamp(0.0, 1.0)
}

/// [`Judge`] implementation backed by the exact rubric.
#[derive(Debug, Clone, Default)]
pub struct ProgrammaticJudge {
    pub config: JudgeConfig,
}

impl Judge for ProgrammaticJudge {
    fn judge(
        &self,
        references: &[RasterImage],
        instruction: &Instruction,
        candidate: &RasterImage,
    ) -> Result<RewardBreakdown, RewardError> {
        judge_programmatic(references, instruction, candidate, &self.config)
    }

    fn kind(&self) -> JudgeKind {
        JudgeKind::Programmatic
    }
}
