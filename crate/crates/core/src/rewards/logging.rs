//! Append-only reward log: one JSON line per judged sample, serialized
//! writes so concurrent rollouts never interleave partial lines.

use super::RewardError;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

/// One judged rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub run_id: String,
    pub step: u64,
    pub prompt_id: String,
    pub group_index: usize,
    pub integration: f64,
    pub consistency: f64,
    pub quality: f64,
    pub total: f64,
    /// Group-relative advantage, once known.
    pub advantage: Option<f64>,
    /// Which judge produced the scores ("programmatic" or "remote").
    pub judge: String,
    /// Unix epoch milliseconds; excluded from reproducibility comparisons.
    pub timestamp_ms: u64,
}

impl RewardRecord {
    pub fn now_ms() -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Serialized appender over a JSONL file.
pub struct RewardLogger {
    writer: Mutex<BufWriter<File>>,
    path: PathBuf,
}

impl RewardLogger {
    /// Create (or truncate) the log file.
    pub fn create(path: &Path) -> Result<Self, RewardError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = File::create(path)?;
        Ok(Self {
            writer: Mutex::new(BufWriter::new(file)),
            path: path.to_path_buf(),
        })
    }

    /// Open an existing log for appending.
    pub fn append_to(path: &Path) -> Result<Self, RewardError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            writer: Mutex::new(BufWriter::new(file)),
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append one record as a single line and flush.
    pub fn append(&self, record: &RewardRecord) -> Result<(), RewardError> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut writer = self.writer.lock().expect("reward log poisoned");
        writer.write_all(line.as_bytes())?;
        writer.flush()?;
        Ok(())
    }

    /// Parse a log back into records.
    pub fn read_all(path: &Path) -> Result<Vec<RewardRecord>, RewardError> {
        let reader = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(records)
    }
}
