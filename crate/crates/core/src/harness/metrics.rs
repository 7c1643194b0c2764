//! Metrics canonicalization.
//!
//! Reproducibility comparisons treat two runs as identical when their
//! metrics agree after dropping wall-clock fields. The canonical form
//! parses each JSONL line, removes `wall_ms` and `timestamp_ms`, and
//! re-serializes with sorted keys.

use super::HarnessError;

const WALL_CLOCK_FIELDS: [&str; 2] = ["wall_ms", "timestamp_ms"];

/// Canonicalize a metrics JSONL document. Line numbers in errors are
/// 1-based.
pub fn canonicalize_metrics(text: &str) -> Result<String, HarnessError> {
    let mut out = String::with_capacity(text.len());
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| HarnessError::MetricLine {
                file: "<memory>".to_string(),
                line: index + 1,
                reason: e.to_string(),
            })?;
        if let Some(object) = value.as_object_mut() {
            for field in WALL_CLOCK_FIELDS {
                object.remove(field);
            }
        }
        out.push_str(&serde_json::to_string(&value).expect("value reserializes"));
        out.push('\n');
    }
    Ok(out)
}

/// Canonicalize a metrics file from disk, naming it in any error.
pub fn canonicalize_metrics_file(path: &std::path::Path) -> Result<String, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    canonicalize_metrics(&text).map_err(|e| match e {
        HarnessError::MetricLine { line, reason, .. } => HarnessError::MetricLine {
            file: path.display().to_string(),
            line,
            reason,
        },
        other => other,
    })
}
