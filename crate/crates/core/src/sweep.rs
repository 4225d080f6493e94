//! Grid sweeps over (η, m) on a quadratic problem: steps-to-target per
//! cell, and T*, the 1st percentile of the finite cells.

use std::cmp::Ordering;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{run_async, DelayConfig, RunSpec, RunStatus};
use crate::metrics::percentile;
use crate::nqm::{NqmOracle, QuadraticProblem};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::param::{GroupMode, GroupSpec};
use crate::rng::{stream_id, Rng};

pub const DEFAULT_MAX_STEPS: u64 = 500_000;

/// `n` values from `lo` to `hi` evenly spaced in log space.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || n == 0 {
        return Err(Error::config("eta_values", format!("bad log range {lo}..{hi} with {n} points")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut out: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect();
    out[0] = lo;
    out[n - 1] = hi;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub eta_values: Vec<f64>,
    pub momentum_values: Vec<f64>,
    pub max_steps: u64,
    pub target: f64,
    pub trials_per_cell: usize,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.eta_values.is_empty() || self.eta_values.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::config("eta_values", "need at least one value, all > 0"));
        }
        if self.momentum_values.is_empty() || self.momentum_values.iter().any(|&m| !(0.0..1.0).contains(&m)) {
            return Err(Error::config("momentum_values", "need at least one value, all in [0, 1)"));
        }
        if self.max_steps < 1 {
            return Err(Error::config("max_steps", "must be >= 1"));
        }
        if !(self.target > 0.0) {
            return Err(Error::config("target_loss", "must be > 0"));
        }
        if self.trials_per_cell < 1 {
            return Err(Error::config("trials_per_cell", "must be >= 1"));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.eta_values.len() * self.momentum_values.len()
    }
}

/// Result of one run. Orders finite step counts first, then `Timeout`,
/// then `Diverged`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellOutcome {
    Converged(u64),
    Timeout,
    Diverged,
}

impl CellOutcome {
    fn rank(self) -> (u8, u64) {
        match self {
            CellOutcome::Converged(t) => (0, t),
            CellOutcome::Timeout => (1, 0),
            CellOutcome::Diverged => (2, 0),
        }
    }

    pub fn steps(self) -> Option<u64> {
        match self {
            CellOutcome::Converged(t) => Some(t),
            _ => None,
        }
    }

    pub fn status_name(self) -> &'static str {
        match self {
            CellOutcome::Converged(_) => "converged",
            CellOutcome::Timeout => "timeout",
            CellOutcome::Diverged => "diverged",
        }
    }

    /// Lower median under the outcome ordering.
    pub fn median(outcomes: &[CellOutcome]) -> Option<CellOutcome> {
        let mut sorted = outcomes.to_vec();
        sorted.sort();
        sorted.get(sorted.len().checked_sub(1)? / 2).copied()
    }
}

impl From<RunStatus> for CellOutcome {
    fn from(s: RunStatus) -> Self {
        match s {
            RunStatus::Converged { step } => CellOutcome::Converged(step),
            RunStatus::Timeout => CellOutcome::Timeout,
            RunStatus::Diverged { .. } => CellOutcome::Diverged,
        }
    }
}

impl Ord for CellOutcome {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank().cmp(&other.rank())
    }
}

impl PartialOrd for CellOutcome {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for CellOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellOutcome::Converged(t) => write!(f, "{t}"),
            other => f.write_str(other.status_name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub eta_index: usize,
    pub momentum_index: usize,
    pub eta: f64,
    pub momentum: f64,
    pub trials: Vec<CellOutcome>,
    pub median: CellOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub grid: SweepGrid,
    /// Row-major over (eta, momentum).
    pub cells: Vec<SweepCell>,
    pub t_star: Option<f64>,
}

impl SweepResult {
    pub fn cell(&self, eta_index: usize, momentum_index: usize) -> &SweepCell {
        &self.cells[eta_index * self.grid.momentum_values.len() + momentum_index]
    }

    /// Median T of every cell with a finite one.
    pub fn finite_steps(&self) -> Vec<f64> {
        self.cells.iter().filter_map(|c| c.median.steps()).map(|t| t as f64).collect()
    }
}

/// Everything about a sweep other than the grid.
#[derive(Debug, Clone)]
pub struct SweepSetup<'a> {
    pub problem: &'a QuadraticProblem,
    /// `eta` and `momentum` are replaced per cell.
    pub base: OptimizerConfig,
    pub grouping: GroupMode,
    pub delay: u64,
    pub seed: u64,
    /// Worker threads; `None` uses rayon's default.
    pub parallelism: Option<usize>,
}

/// 1st percentile of the finite per-cell T values.
pub fn t_star(result: &SweepResult) -> Option<f64> {
    percentile(&result.finite_steps(), 1.0)
}

/// Runs one trial of one cell. Trial `k` of cell `(i, j)` always draws from
/// the same random stream, whatever else is in the sweep.
pub fn run_trial(setup: &SweepSetup<'_>, grid: &SweepGrid, eta_index: usize, momentum_index: usize, trial: usize) -> Result<CellOutcome> {
    let n = setup.problem.dim();
    let cfg = OptimizerConfig {
        eta: grid.eta_values[eta_index],
        momentum: grid.momentum_values[momentum_index],
        ..setup.base
    };
    let groups = GroupSpec::for_flat(setup.grouping, n)?;
    let delay = DelayConfig::new(setup.delay);
    let optimizer = Optimizer::new(cfg, groups, n, delay.num_workers())?;
    let rng = Rng::substream(setup.seed, stream_id(&[eta_index as u64, momentum_index as u64, trial as u64]));
    let mut oracle = NqmOracle::new(setup.problem, rng);
    let spec = RunSpec::new(grid.max_steps).with_target(grid.target);
    let run = run_async(&mut oracle, optimizer, setup.problem.w0(), delay, &spec, None)?;
    Ok(run.status.into())
}

/// Evaluates every cell of `grid`, in parallel when allowed.
pub fn run_sweep(setup: &SweepSetup<'_>, grid: &SweepGrid) -> Result<SweepResult> {
    grid.validate()?;
    setup.base.validate()?;
    GroupSpec::for_flat(setup.grouping, setup.problem.dim())?;
    let cols = grid.momentum_values.len();
    let eval = |idx: usize| -> Result<SweepCell> {
        let (i, j) = (idx / cols, idx % cols);
        let trials = (0..grid.trials_per_cell)
            .map(|k| run_trial(setup, grid, i, j, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(SweepCell {
            eta_index: i,
            momentum_index: j,
            eta: grid.eta_values[i],
            momentum: grid.momentum_values[j],
            median: CellOutcome::median(&trials).expect("at least one trial"),
            trials,
        })
    };
    let cells = match setup.parallelism {
        Some(0) => return Err(Error::config("parallelism", "must be >= 1")),
        Some(1) => (0..grid.num_cells()).map(eval).collect::<Result<Vec<_>>>()?,
        threads => {
            let mut builder = rayon::ThreadPoolBuilder::new();
            if let Some(t) = threads {
                builder = builder.num_threads(t);
            }
            let pool = builder
                .build()
                .map_err(|e| Error::config("parallelism", e.to_string()))?;
            pool.install(|| (0..grid.num_cells()).into_par_iter().map(eval).collect::<Result<Vec<_>>>())?
        }
    };
    let mut result = SweepResult {
        grid: grid.clone(),
        cells,
        t_star: None,
    };
    result.t_star = t_star(&result);
    Ok(result)
}
