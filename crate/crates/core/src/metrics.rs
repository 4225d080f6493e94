//! Trace rows and derived diagnostics: gradient/velocity ratio, update
//! alignment, percentiles and cross-run aggregation.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::harness::{RunResult, RunStatus};
use crate::param::{dot_slice, sq_norm_slice, ParamVector};

/// One recorded step of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    /// Loss at the master weights after this step.
    pub loss: f64,
    pub energy: Option<f64>,
    pub accuracy: Option<f64>,
    /// ‖v‖ over all parameters after the step.
    pub vel_norm_total: f64,
    /// cos∠(applied weight delta, g) over all parameters.
    pub update_alignment: Option<f64>,
    pub alpha: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub vel_norm: Vec<f64>,
    pub gvr: Vec<f64>,
}

#[inline]
pub(crate) fn gvr_from_norms(grad_norm: f64, vel_norm: f64) -> f64 {
    if vel_norm == 0.0 {
        f64::INFINITY
    } else {
        grad_norm / vel_norm
    }
}

/// ‖g‖/‖v‖ over `group`; `+∞` when the velocity is zero.
pub fn gvr(g: &ParamVector, v: &ParamVector, group: Range<usize>) -> Result<f64> {
    if g.len() != v.len() || group.end > g.len() || group.start >= group.end {
        return Err(Error::contract(format!("invalid group {group:?} for gvr")));
    }
    let gn = sq_norm_slice(&g[group.clone()]).sqrt();
    let vn = sq_norm_slice(&v[group]).sqrt();
    Ok(gvr_from_norms(gn, vn))
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = sq_norm_slice(a).sqrt();
    let nb = sq_norm_slice(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot_slice(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// cos∠(m·v + α·g, g) over `group`. `None` when the update or the gradient
/// is zero.
pub fn update_alignment(
    g: &ParamVector,
    v: &ParamVector,
    alpha: f64,
    momentum: f64,
    group: Range<usize>,
) -> Result<Option<f64>> {
    if g.len() != v.len() || group.end > g.len() || group.start >= group.end {
        return Err(Error::contract(format!("invalid group {group:?} for update_alignment")));
    }
    let gs = &g[group.clone()];
    let update: Vec<f64> = v[group]
        .iter()
        .zip(gs)
        .map(|(vk, gk)| momentum * vk + alpha * gk)
        .collect();
    Ok(cosine(&update, gs))
}

/// Cosine between an applied weight delta and the gradient.
pub(crate) fn delta_alignment(before: &[f64], after: &[f64], g: &[f64]) -> Option<f64> {
    let delta: Vec<f64> = before.iter().zip(after).map(|(b, a)| b - a).collect();
    cosine(&delta, g)
}

/// Percentile `p` ∈ [0, 100] with linear interpolation between closest
/// ranks. `None` for empty input.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(percentile_sorted(&sorted, p))
}

pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> Option<f64> {
    percentile(values, 50.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub count: usize,
    pub median: f64,
    /// `(p, value)` pairs in the order requested.
    pub percentiles: Vec<(f64, f64)>,
}

pub fn summarize(values: &[f64], percentiles: &[f64]) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(MetricSummary {
        count: sorted.len(),
        median: percentile_sorted(&sorted, 50.0),
        percentiles: percentiles
            .iter()
            .map(|&p| (p, percentile_sorted(&sorted, p)))
            .collect(),
    })
}

/// Median of `metric` over the last `k` recorded rows.
pub fn final_metric(rows: &[TraceRow], k: usize, metric: impl Fn(&TraceRow) -> Option<f64>) -> Option<f64> {
    let start = rows.len().saturating_sub(k.max(1));
    let vals: Vec<f64> = rows[start..].iter().filter_map(metric).collect();
    median(&vals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunAggregate {
    pub runs: usize,
    pub final_loss: MetricSummary,
    pub final_accuracy: Option<MetricSummary>,
    /// Over converged runs only.
    pub steps_to_target: Option<MetricSummary>,
    pub diverged: usize,
}

/// Cross-trial summary. Each run contributes the median of its last
/// `last_k` trace rows (or its final loss when it has no trace).
pub fn aggregate(runs: &[RunResult], last_k: usize, percentiles: &[f64]) -> Result<RunAggregate> {
    if runs.is_empty() {
        return Err(Error::contract("aggregate needs at least one run"));
    }
    let losses: Vec<f64> = runs
        .iter()
        .map(|r| final_metric(&r.trace, last_k, |row| Some(row.loss)).unwrap_or(r.final_loss))
        .collect();
    let accs: Vec<f64> = runs
        .iter()
        .filter_map(|r| final_metric(&r.trace, last_k, |row| row.accuracy))
        .collect();
    let ts: Vec<f64> = runs
        .iter()
        .filter_map(|r| match r.status {
            RunStatus::Converged { step } => Some(step as f64),
            _ => None,
        })
        .collect();
    Ok(RunAggregate {
        runs: runs.len(),
        final_loss: summarize(&losses, percentiles).expect("nonempty"),
        final_accuracy: summarize(&accs, percentiles),
        steps_to_target: summarize(&ts, percentiles),
        diverged: runs
            .iter()
            .filter(|r| matches!(r.status, RunStatus::Diverged { .. }))
            .count(),
    })
}
