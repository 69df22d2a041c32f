//! Continual-learning metrics over evaluation accuracy curves:
//! forgetting, area under the curve, forward transfer, and
//! time-to-first-success. All computed in f64 so that values recomputed
//! from exported CSVs are bitwise identical to the in-memory ones.

use crate::datastore::Dataset;
use crate::error::{CsrlError, Result};
use serde::{Deserialize, Serialize};

/// One evaluation sample: task `task_index` (1-based) evaluated after
/// `global_step` gradient steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub global_step: u64,
    pub task_index: usize,
    pub accuracy: f64,
}

/// Accuracy curves plus the derived per-task metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsTable {
    /// Gradient budget per task.
    pub delta: u64,
    /// N * delta.
    pub total_steps: u64,
    pub eval_every: u64,
    pub tasks: Vec<String>,
    pub curves: Vec<CurvePoint>,
    pub forgetting: Vec<f64>,
    pub auc: Vec<f64>,
    /// Task-local steps to the first nonzero accuracy inside the task's
    /// own training window; None if it never succeeds.
    pub time_to_first_success: Vec<Option<u64>>,
    /// Baseline AUC per task, when a matching single-task run is known.
    pub auc_baseline: Vec<Option<f64>>,
    pub forward_transfer: Vec<Option<f64>>,
}

/// Sorted (step, accuracy) samples of one task's curve.
pub fn curve_of(points: &[CurvePoint], task_index: usize) -> Vec<(u64, f64)> {
    let mut c: Vec<(u64, f64)> = points
        .iter()
        .filter(|p| p.task_index == task_index)
        .map(|p| (p.global_step, p.accuracy))
        .collect();
    c.sort_by_key(|(s, _)| *s);
    c
}

fn value_at(curve: &[(u64, f64)], step: u64) -> Result<f64> {
    curve
        .iter()
        .find(|(s, _)| *s == step)
        .map(|(_, a)| *a)
        .ok_or_else(|| CsrlError::Metric(format!("no eval point at step {step}")))
}

/// F_i = p_i(i * delta) - p_i(T). Negative values mean the task improved
/// after its own training window (backward transfer).
pub fn forgetting(curve: &[(u64, f64)], task_index: usize, delta: u64, total: u64) -> Result<f64> {
    let at_end_of_own = value_at(curve, task_index as u64 * delta)?;
    let at_end = value_at(curve, total)?;
    Ok(at_end_of_own - at_end)
}

/// Trapezoidal integral of the sampled curve over [start, end], divided
/// by the window length.
pub fn auc(curve: &[(u64, f64)], start: u64, end: u64) -> Result<f64> {
    assert!(end > start, "empty integration window");
    let pts: Vec<(u64, f64)> = curve
        .iter()
        .copied()
        .filter(|(s, _)| *s >= start && *s <= end)
        .collect();
    if pts.is_empty() {
        return Err(CsrlError::Metric(format!(
            "no eval points inside window [{start}, {end}]"
        )));
    }
    if pts.len() == 1 {
        return Ok(pts[0].1);
    }
    let mut integral = 0.0f64;
    for w in pts.windows(2) {
        let (s0, a0) = w[0];
        let (s1, a1) = w[1];
        integral += (a0 + a1) * 0.5 * (s1 - s0) as f64;
    }
    Ok(integral / (end - start) as f64)
}

/// FT_i = (AUC_i - AUC_i^b) / (1 - AUC_i^b); undefined (None) when the
/// baseline already saturates at 1.
pub fn forward_transfer(auc_i: f64, auc_baseline: f64) -> Option<f64> {
    if auc_baseline >= 1.0 {
        None
    } else {
        Some((auc_i - auc_baseline) / (1.0 - auc_baseline))
    }
}

/// Smallest task-local step with nonzero accuracy, scanning strictly
/// after the window start (the boundary eval precedes any training on
/// the task); None if the curve stays at zero.
pub fn time_to_first_success(curve: &[(u64, f64)], start: u64, end: u64) -> Option<u64> {
    curve
        .iter()
        .filter(|(s, a)| *s > start && *s <= end && *a > 0.0)
        .map(|(s, _)| s - start)
        .min()
}

/// Derives every per-task metric from the curves.
pub fn compute(
    tasks: &[String],
    curves: Vec<CurvePoint>,
    delta: u64,
    eval_every: u64,
) -> Result<MetricsTable> {
    let n = tasks.len();
    let total = delta * n as u64;
    let mut fs = Vec::with_capacity(n);
    let mut aucs = Vec::with_capacity(n);
    let mut ttfs = Vec::with_capacity(n);
    for i in 1..=n {
        let c = curve_of(&curves, i);
        fs.push(forgetting(&c, i, delta, total)?);
        let start = (i as u64 - 1) * delta;
        let end = i as u64 * delta;
        aucs.push(auc(&c, start, end)?);
        ttfs.push(time_to_first_success(&c, start, end));
    }
    Ok(MetricsTable {
        delta,
        total_steps: total,
        eval_every,
        tasks: tasks.to_vec(),
        curves,
        forgetting: fs,
        auc: aucs,
        time_to_first_success: ttfs,
        auc_baseline: vec![None; n],
        forward_transfer: vec![None; n],
    })
}

/// Per-episode reward summary for the collection heat map: one row
/// (object x, object y, episode return) per episode.
pub fn reward_map(dataset: &Dataset) -> Vec<(f32, f32, f32)> {
    dataset
        .episodes
        .iter()
        .map(|ep| (ep.object_x, ep.object_y, ep.episode_return()))
        .collect()
}

// ── csv io ──────────────────────────────────────────────────────────

pub fn curves_to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("global_step,task_index,accuracy\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.global_step, p.task_index, p.accuracy));
    }
    out
}

pub fn curves_from_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != "global_step,task_index,accuracy" {
                return Err(CsrlError::Metric(format!("unexpected curves header `{line}`")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut f = line.split(',');
        let parse_err = || CsrlError::Metric(format!("bad curves row {lineno}: `{line}`"));
        let global_step = f.next().ok_or_else(parse_err)?.parse().map_err(|_| parse_err())?;
        let task_index = f.next().ok_or_else(parse_err)?.parse().map_err(|_| parse_err())?;
        let accuracy = f.next().ok_or_else(parse_err)?.parse().map_err(|_| parse_err())?;
        points.push(CurvePoint {
            global_step,
            task_index,
            accuracy,
        });
    }
    Ok(points)
}
