//! Inference wall-clock timing against a reference budget.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference inference time of the challenge baseline on the full test set.
pub const PUBLISHED_BASELINE_SECONDS: f64 = 396.0;
/// Published full-scale inference times.
pub const PUBLISHED_TEMPORAL_SECONDS: f64 = 229.0;
pub const PUBLISHED_AERIAL_SECONDS: f64 = 429.0;
pub const PUBLISHED_FUSED_SECONDS: f64 = 594.0;
pub const PUBLISHED_ENSEMBLE_SECONDS: f64 = 943.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingBudget {
    pub baseline_seconds: f64,
    pub max_ratio: f64,
}

impl Default for TimingBudget {
    fn default() -> Self {
        Self {
            baseline_seconds: PUBLISHED_BASELINE_SECONDS,
            max_ratio: 2.5,
        }
    }
}

impl TimingBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.baseline_seconds > 0.0 && self.baseline_seconds.is_finite()) || !(self.max_ratio > 0.0 && self.max_ratio.is_finite()) {
            return Err(Error::config(format!(
                "timing budget needs positive baseline and ratio, got {} s and {}",
                self.baseline_seconds, self.max_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub model: String,
    pub seconds: f64,
    pub ratio: f64,
    pub within_budget: bool,
}

impl TimingReport {
    pub fn new(model: impl Into<String>, seconds: f64, budget: &TimingBudget) -> Self {
        let ratio = seconds / budget.baseline_seconds;
        Self {
            model: model.into(),
            seconds,
            ratio,
            within_budget: ratio <= budget.max_ratio,
        }
    }
}

/// Median wall-clock seconds of `reps` calls after `warmup` untimed calls.
pub fn time_inference<F>(warmup: usize, reps: usize, mut run: F) -> Result<f64>
where
    F: FnMut() -> Result<()>,
{
    if reps == 0 {
        return Err(Error::config("at least one timed repetition is required"));
    }
    for _ in 0..warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let mid = reps / 2;
    Ok(if reps % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) })
}

/// Model, seconds and relative time, fastest first.
pub fn compare(reports: &[TimingReport]) -> String {
    let mut sorted: Vec<&TimingReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    let width = sorted.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}  {:>12}  {:>13}\n", "Model", "Time (s)", "Relative time");
    for r in sorted {
        let flag = if r.within_budget { "" } else { "  over budget" };
        let _ = writeln!(out, "{:<width$}  {:>12.3}  {:>13.2}{flag}", r.model, r.seconds, r.ratio);
    }
    out
}

/// The published full-scale timing table.
pub fn published_reports() -> Vec<TimingReport> {
    let b = TimingBudget::default();
    vec![
        TimingReport::new("U-TAE", PUBLISHED_TEMPORAL_SECONDS, &b),
        TimingReport::new("UNetFormer", PUBLISHED_AERIAL_SECONDS, &b),
        TimingReport::new("LF-DLM", PUBLISHED_FUSED_SECONDS, &b),
        TimingReport::new("LF-DLM ensemble", PUBLISHED_ENSEMBLE_SECONDS, &b),
    ]
}
