//! SVG charts over metrics files: training loss with budget-stage markers,
//! RL reward per phase, and clip-fraction/KL diagnostics. Output is plain
//! hand-assembled SVG with fixed-precision numbers, so identical inputs
//! produce identical bytes.

use super::HarnessError;
use std::path::{Path, PathBuf};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;

struct Chart {
    title: String,
    body: String,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Chart {
    fn new(title: &str, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let pad = |lo: f64, hi: f64| {
            if (hi - lo).abs() < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Self {
            title: title.to_string(),
            body: String::new(),
            x_range: pad(x_range.0, x_range.1),
            y_range: pad(y_range.0, y_range.1),
        }
    }

    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.x_range.0) / (self.x_range.1 - self.x_range.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT
            - MARGIN
            - (v - self.y_range.0) / (self.y_range.1 - self.y_range.0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn polyline(&mut self, points: &[(f64, f64)], color: &str) {
        if points.is_empty() {
            return;
        }
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", self.x(x), self.y(y)))
            .collect();
        self.body.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
    }

    fn vline(&mut self, x: f64, color: &str, label: &str) {
        let px = self.x(x);
        self.body.push_str(&format!(
            "<line x1=\"{px:.2}\" y1=\"{:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-dasharray=\"4 3\"/>\n",
            self.y(self.y_range.1),
            self.y(self.y_range.0),
        ));
        self.body.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" fill=\"{color}\">{label}</text>\n",
            px + 3.0,
            MARGIN + 12.0
        ));
    }

    fn legend(&mut self, entries: &[(&str, &str)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = MARGIN + 16.0 * i as f64;
            self.body.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
                WIDTH - MARGIN - 110.0,
                y
            ));
            self.body.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{label}</text>\n",
                WIDTH - MARGIN - 95.0,
                y + 9.0
            ));
        }
    }

    fn finish(self) -> String {
        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
        ));
        svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"24\" font-size=\"15\" font-weight=\"bold\">{}</text>\n",
            MARGIN, self.title
        ));
        // Axes.
        svg.push_str(&format!(
            "<line x1=\"{m:.2}\" y1=\"{b:.2}\" x2=\"{r:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>\n",
            m = MARGIN,
            b = HEIGHT - MARGIN,
            r = WIDTH - MARGIN
        ));
        svg.push_str(&format!(
            "<line x1=\"{m:.2}\" y1=\"{t:.2}\" x2=\"{m:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>\n",
            m = MARGIN,
            t = MARGIN,
            b = HEIGHT - MARGIN
        ));
        for (value, px, py, anchor) in [
            (self.x_range.0, MARGIN, HEIGHT - MARGIN + 16.0, "middle"),
            (
                self.x_range.1,
                WIDTH - MARGIN,
                HEIGHT - MARGIN + 16.0,
                "middle",
            ),
            (self.y_range.0, MARGIN - 6.0, HEIGHT - MARGIN, "end"),
            (self.y_range.1, MARGIN - 6.0, MARGIN + 4.0, "end"),
        ] {
            svg.push_str(&format!(
                "<text x=\"{px:.2}\" y=\"{py:.2}\" font-size=\"10\" text-anchor=\"{anchor}\">{value:.4}</text>\n"
            ));
        }
        svg.push_str(&self.body);
        svg.push_str("</svg>\n");
        svg
    }
}

fn parse_lines(path: &Path) -> Result<Vec<serde_json::Value>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| HarnessError::MetricLine {
                file: path.display().to_string(),
                line: index + 1,
                reason: e.to_string(),
            })?;
        rows.push(value);
    }
    Ok(rows)
}

fn field(rows: &[serde_json::Value], name: &str) -> Vec<f64> {
    rows.iter()
        .filter_map(|r| r.get(name).and_then(|v| v.as_f64()))
        .collect()
}

fn range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo.min(hi), hi.max(lo))
}

fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let start = i.saturating_sub(window - 1);
            let slice = &values[start..=i];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect()
}

fn sft_chart(rows: &[serde_json::Value]) -> String {
    let steps = field(rows, "step");
    let losses = field(rows, "loss");
    let budgets = field(rows, "budget");
    let smoothed = moving_average(&losses, 100);
    let mut all = losses.clone();
    all.extend_from_slice(&smoothed);
    let mut chart = Chart::new("training loss", range(&steps), range(&all));
    let points: Vec<(f64, f64)> = steps.iter().copied().zip(losses.iter().copied()).collect();
    chart.polyline(&points, "#9ecae1");
    let ma_points: Vec<(f64, f64)> = steps
        .iter()
        .copied()
        .zip(smoothed.iter().copied())
        .collect();
    chart.polyline(&ma_points, "#08519c");
    for i in 1..budgets.len() {
        if budgets[i] != budgets[i - 1] {
            chart.vline(steps[i], "#d62728", &format!("budget {}", budgets[i]));
        }
    }
    chart.legend(&[("loss", "#9ecae1"), ("100-step mean", "#08519c")]);
    chart.finish()
}

fn rl_reward_chart(rows: &[serde_json::Value]) -> String {
    let steps = field(rows, "step");
    let rewards = field(rows, "mean_reward");
    let mut chart = Chart::new("mean group reward", range(&steps), range(&rewards));
    let points: Vec<(f64, f64)> = steps.iter().copied().zip(rewards.iter().copied()).collect();
    chart.polyline(&points, "#2ca02c");
    let phases: Vec<String> = rows
        .iter()
        .filter_map(|r| r.get("phase").and_then(|v| v.as_str()).map(String::from))
        .collect();
    for i in 1..phases.len() {
        if phases[i] != phases[i - 1] {
            chart.vline(steps[i], "#7f7f7f", &phases[i]);
        }
    }
    chart.finish()
}

fn rl_diagnostics_chart(rows: &[serde_json::Value]) -> String {
    let steps = field(rows, "step");
    let clip = field(rows, "clip_fraction");
    let kl = field(rows, "mean_kl");
    let mut all = clip.clone();
    all.extend_from_slice(&kl);
    let mut chart = Chart::new("clip fraction and KL", range(&steps), range(&all));
    let clip_points: Vec<(f64, f64)> = steps.iter().copied().zip(clip.iter().copied()).collect();
    let kl_points: Vec<(f64, f64)> = steps.iter().copied().zip(kl.iter().copied()).collect();
    chart.polyline(&clip_points, "#ff7f0e");
    chart.polyline(&kl_points, "#9467bd");
    chart.legend(&[("clip fraction", "#ff7f0e"), ("mean KL", "#9467bd")]);
    chart.finish()
}

/// Render charts for each metrics file into `out_dir`; returns the chart
/// paths. Empty input is a warning, not an error.
pub fn plot_metrics(files: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    std::fs::create_dir_all(out_dir)?;
    for file in files {
        let rows = parse_lines(file)?;
        if rows.is_empty() {
            eprintln!("warning: {} has no metric lines, skipping", file.display());
            continue;
        }
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("metrics")
            .to_string();
        let is_rl = rows[0].get("phase").is_some();
        if is_rl {
            let reward = out_dir.join(format!("{stem}_reward.svg"));
            std::fs::write(&reward, rl_reward_chart(&rows))?;
            written.push(reward);
            let diag = out_dir.join(format!("{stem}_diagnostics.svg"));
            std::fs::write(&diag, rl_diagnostics_chart(&rows))?;
            written.push(diag);
        } else {
            let loss = out_dir.join(format!("{stem}_loss.svg"));
            std::fs::write(&loss, sft_chart(&rows))?;
            written.push(loss);
        }
    }
    if written.is_empty() {
        eprintln!("warning: no charts produced (no usable metrics input)");
    }
    Ok(written)
}
