//! Operational shell: run configuration with dotted-path overrides,
//! deterministic evaluation, metrics canonicalization, SVG plots, and
//! single-writer output directories.

pub mod eval;
pub mod metrics;
pub mod plot;

pub use eval::{evaluate, evaluate_ground_truth, EvalAgg, EvalOptions, EvalReport, EvalRow};
pub use metrics::canonicalize_metrics;
pub use plot::plot_metrics;

use crate::backbone::BackboneConfig;
use crate::flowmatch::{FlowError, SftConfig};
use crate::msgrpo::{RlConfig, RlError};
use crate::rewards::{Judge, JudgeConfig, ProgrammaticJudge, RemoteJudge, RewardError};
use crate::sampler::SamplerError;
use crate::taskgen::{GenConfig, TaskGenError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("output directory {0} is locked by another writer (remove .lock if stale)")]
    LockHeld(PathBuf),
    #[error("{file}:{line}: malformed metrics line: {reason}")]
    MetricLine {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    TaskGen(#[from] TaskGenError),
    #[error(transparent)]
    Backbone(#[from] crate::backbone::BackboneError),
    #[error(transparent)]
    Checkpoint(#[from] crate::backbone::checkpoint::CheckpointError),
}

/// Which judge scores rollouts and evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeSelection {
    Programmatic,
    Remote,
}

/// Whole-run configuration; every leaf is overridable from the command line
/// via dotted paths, and unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Training dataset directory.
    pub dataset: Option<PathBuf>,
    /// Held-out dataset directory for evaluation.
    pub eval_dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub model: BackboneConfig,
    pub sft: SftConfig,
    pub rl: RlConfig,
    pub judge: JudgeSelection,
    pub judge_config: JudgeConfig,
    pub gen: GenConfig,
    /// Worker threads for data-parallel sections; 0 uses the rayon default.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: None,
            eval_dataset: None,
            out_dir: None,
            model: BackboneConfig::desk_default(),
            sft: SftConfig::desk_default(),
            rl: RlConfig::desk_default(),
            judge: JudgeSelection::Programmatic,
            judge_config: JudgeConfig::default(),
            gen: GenConfig::default(),
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.sft
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.rl
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.judge_config
            .weights
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let expected_channels = 3 * self.sft.patch_pixels * self.sft.patch_pixels;
        if self.model.token_channels != expected_channels {
            return Err(HarnessError::Config(format!(
                "model.token_channels = {} but sft.patch_pixels = {} implies {}",
                self.model.token_channels, self.sft.patch_pixels, expected_channels
            )));
        }
        Ok(())
    }

    pub fn build_judge(&self) -> Result<Box<dyn Judge>, HarnessError> {
        match self.judge {
            JudgeSelection::Programmatic => Ok(Box::new(ProgrammaticJudge {
                config: self.judge_config.clone(),
            })),
            JudgeSelection::Remote => {
                let judge = RemoteJudge::from_env(
                    self.judge_config.weights,
                    &self.judge_config.rubric_version,
                )?;
                Ok(Box::new(judge))
            }
        }
    }
}

/// Parse an override value: JSON when it parses, bare string otherwise.
fn override_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

fn apply_override(
    root: &mut serde_json::Value,
    path: &str,
    raw: &str,
) -> Result<(), HarnessError> {
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let object = cursor
            .as_object_mut()
            .ok_or_else(|| HarnessError::Config(format!("override path {path} is not an object")))?;
        if i + 1 == parts.len() {
            object.insert(part.to_string(), override_value(raw));
            return Ok(());
        }
        cursor = object
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err(HarnessError::Config(format!("empty override path {path}")))
}

/// Load a config file (defaults when absent), apply `key.path=value`
/// overrides (flags win), then validate strictly.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<RunConfig, HarnessError> {
    let mut value: serde_json::Value = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => serde_json::to_value(RunConfig::default())?,
    };
    for (key, raw) in overrides {
        apply_override(&mut value, key, raw)?;
    }
    let config: RunConfig =
        serde_json::from_value(value).map_err(|e| HarnessError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Write the exact resolved configuration into the output directory.
pub fn write_resolved_config(dir: &Path, config: &RunConfig) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(config)?;
    std::fs::write(dir.join("resolved_config.json"), json)?;
    Ok(())
}

/// Cap the global worker pool; 0 keeps the library default. Returns
/// whether the setting applied (it cannot once the pool is in use).
pub fn init_worker_pool(workers: usize) -> bool {
    if workers == 0 {
        return true;
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .is_ok()
}

/// Exclusive-writer guard over an output directory, held via a `.lock`
/// file that is removed on drop.
pub struct RunDirLock {
    path: PathBuf,
}

impl RunDirLock {
    pub fn acquire(dir: &Path) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut file) => {
                use std::io::Write;
                let _ = writeln!(file, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(HarnessError::LockHeld(dir.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
