//! Reward provision: an exact programmatic judge for synthetic tasks, a
//! remote judge wire client with retries, and append-only reward logging.
//! The two judges are interchangeable behind the [`Judge`] trait, so the RL
//! stage never knows which one scored a rollout.

pub mod logging;
pub mod mock;
pub mod programmatic;
pub mod remote;

pub use logging::{RewardLogger, RewardRecord};
pub use programmatic::{expected_layout, judge_programmatic, JudgeConfig, ProgrammaticJudge};
pub use remote::{JudgeRequest, JudgeResponse, RemoteJudge, RetryPolicy};

use crate::backbone::{Instruction, InstructionError};
use crate::rasters::{RasterError, RasterImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("candidate is {got_h}x{got_w} but references are {want_h}x{want_w}")]
    DimensionMismatch {
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("{dimension} score {value} outside [0, 10]")]
    ScoreOutOfRange { dimension: &'static str, value: f64 },
    #[error("reward weights must be non-negative with a positive sum")]
    BadWeights,
    #[error("reference {0} shows no element")]
    EmptyReference(usize),
    #[error("a judge request needs at least one reference")]
    NoReferences,
    #[error("judge unavailable after {attempts} attempts: {last_error}")]
    JudgeUnavailable { attempts: u32, last_error: String },
    #[error("malformed judge response ({reason}); body: {body}")]
    MalformedResponse { reason: String, body: String },
    #[error("judge endpoint returned status {status}: {body}")]
    Protocol { status: u16, body: String },
    #[error("reward log io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("reward log parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Instruction(#[from] InstructionError),
}

/// Weights for the three rubric dimensions; the total is their normalized
/// weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub integration: f64,
    pub consistency: f64,
    pub quality: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            integration: 1.0 / 3.0,
            consistency: 1.0 / 3.0,
            quality: 1.0 / 3.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        let ws = [self.integration, self.consistency, self.quality];
        if ws.iter().any(|w| *w < 0.0 || !w.is_finite()) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(RewardError::BadWeights);
        }
        Ok(())
    }
}

/// Normalized weighted sum of the three scores; stays in [0, 10].
pub fn total_reward(
    integration: f64,
    consistency: f64,
    quality: f64,
    weights: &RewardWeights,
) -> Result<f64, RewardError> {
    weights.validate()?;
    let sum = weights.integration + weights.consistency + weights.quality;
    Ok(
        (weights.integration * integration
            + weights.consistency * consistency
            + weights.quality * quality)
            / sum,
    )
}

/// Scores along the three rubric dimensions plus their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub integration: f64,
    pub consistency: f64,
    pub quality: f64,
    pub total: f64,
    pub rationale: Option<String>,
}

impl RewardBreakdown {
    /// Validates the range of every dimension and computes the total.
    pub fn new(
        integration: f64,
        consistency: f64,
        quality: f64,
        rationale: Option<String>,
        weights: &RewardWeights,
    ) -> Result<Self, RewardError> {
        for (dimension, value) in [
            ("integration", integration),
            ("consistency", consistency),
            ("quality", quality),
        ] {
            if !(0.0..=10.0).contains(&value) || !value.is_finite() {
                return Err(RewardError::ScoreOutOfRange { dimension, value });
            }
        }
        let total = total_reward(integration, consistency, quality, weights)?;
        Ok(Self {
            integration,
            consistency,
            quality,
            total,
            rationale,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    Programmatic,
    Remote,
}

impl std::fmt::Display for JudgeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            JudgeKind::Programmatic => write!(f, "programmatic"),
            JudgeKind::Remote => write!(f, "remote"),
        }
    }
}

/// Anything that can score a candidate against references and an
/// instruction.
pub trait Judge: Send + Sync {
    fn judge(
        &self,
        references: &[RasterImage],
        instruction: &Instruction,
        candidate: &RasterImage,
    ) -> Result<RewardBreakdown, RewardError>;

    fn kind(&self) -> JudgeKind;
}
