//! Simulated asynchronous master/worker training with a constant delay.
//!
//! `D + 1` workers contribute gradients in round-robin order, so the
//! gradient applied at step `t` was computed on the master weights from
//! step `t − D`. A ring buffer holds the last `D + 1` master snapshots; for
//! the first `D` steps every worker sees the initial weights.
//!
//! Steps are 1-based: step `t` turns `w_{t-1}` into `w_t`, and `w_0` is the
//! initial point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{delta_alignment, TraceRow};
use crate::optim::{Algorithm, Optimizer, OptimizerState, StepDiagnostics, UpdateContext};
use crate::param::ParamVector;

/// Default divergence cutoff: loss above this multiple of the initial loss.
pub const DEFAULT_DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayConfig {
    pub delay: u64,
}

impl DelayConfig {
    pub fn new(delay: u64) -> Self {
        DelayConfig { delay }
    }

    pub fn num_workers(&self) -> usize {
        self.delay as usize + 1
    }

    /// Worker serving step `t` under round robin.
    pub fn worker_for_step(&self, t: u64) -> usize {
        (t % (self.delay + 1)) as usize
    }
}

/// Ring buffer of the last `D + 1` snapshots.
#[derive(Debug, Clone)]
pub struct WeightHistory {
    ring: Vec<ParamVector>,
    head: usize,
}

impl WeightHistory {
    /// Every slot starts as `w0`, so early lookups return the initial weights.
    pub fn new(w0: &ParamVector, delay: u64) -> Self {
        WeightHistory {
            ring: vec![w0.clone(); delay as usize + 1],
            head: 0,
        }
    }

    pub fn delay(&self) -> usize {
        self.ring.len() - 1
    }

    /// Snapshot from `offset` pushes ago (0 = newest). Panics if `offset > D`.
    pub fn get(&self, offset: usize) -> &ParamVector {
        assert!(offset < self.ring.len(), "offset {offset} beyond history");
        let n = self.ring.len();
        &self.ring[(self.head + n - offset) % n]
    }

    pub fn oldest(&self) -> &ParamVector {
        self.get(self.delay())
    }

    /// Records a new snapshot, overwriting the oldest.
    pub fn push(&mut self, w: &ParamVector) {
        self.head = (self.head + 1) % self.ring.len();
        self.ring[self.head].copy_from(w);
    }
}

/// A (possibly stochastic) gradient source.
pub trait GradientOracle {
    fn dim(&self) -> usize;

    /// Gradient at `w` as computed by `worker` for step `step`.
    fn gradient(
        &mut self,
        w: &ParamVector,
        worker: usize,
        step: u64,
        out: &mut ParamVector,
    ) -> Result<()>;

    /// Noiseless loss at the master weights.
    fn loss(&self, w: &ParamVector) -> Result<f64>;

    fn accuracy(&self, _w: &ParamVector) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warm-up over `warmup_steps`, then multiply by `factor` after
    /// each boundary step.
    StepDecay {
        #[serde(default)]
        warmup_steps: u64,
        boundaries: Vec<u64>,
        factor: f64,
    },
}

impl LrSchedule {
    /// Learning-rate multiplier for step `t` (1-based).
    pub fn multiplier(&self, t: u64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::StepDecay {
                warmup_steps,
                boundaries,
                factor,
            } => {
                let warm = if *warmup_steps > 0 && t <= *warmup_steps {
                    t as f64 / *warmup_steps as f64
                } else {
                    1.0
                };
                let passed = boundaries.iter().filter(|&&b| t > b).count() as i32;
                warm * factor.powi(passed)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LrSchedule::StepDecay { factor, .. } = self {
            if !(factor.is_finite() && *factor > 0.0) {
                return Err(Error::config("schedule.factor", "must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "every", rename_all = "snake_case")]
pub enum TracePolicy {
    #[default]
    None,
    Every(u64),
}

impl TracePolicy {
    fn records(&self, t: u64) -> bool {
        match *self {
            TracePolicy::None => false,
            TracePolicy::Every(k) => k > 0 && t.is_multiple_of(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub max_steps: u64,
    /// Stop as soon as the master loss reaches this value.
    pub target_loss: Option<f64>,
    pub divergence_factor: f64,
    /// Loss evaluation cadence for the stop checks.
    pub eval_every: u64,
    pub trace: TracePolicy,
    /// Per-group α/‖g‖/‖v‖/τ columns in trace rows.
    pub trace_groups: bool,
    /// Keep the loss after every evaluated step in `RunResult::losses`.
    pub record_losses: bool,
    pub schedule: LrSchedule,
}

impl RunSpec {
    pub fn new(max_steps: u64) -> Self {
        RunSpec {
            max_steps,
            target_loss: None,
            divergence_factor: DEFAULT_DIVERGENCE_FACTOR,
            eval_every: 1,
            trace: TracePolicy::None,
            trace_groups: true,
            record_losses: false,
            schedule: LrSchedule::Constant,
        }
    }

    pub fn with_target(mut self, target: f64) -> Self {
        self.target_loss = Some(target);
        self
    }

    pub fn with_trace(mut self, trace: TracePolicy) -> Self {
        self.trace = trace;
        self
    }

    pub fn with_losses(mut self) -> Self {
        self.record_losses = true;
        self
    }

    pub fn with_schedule(mut self, schedule: LrSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_eval_every(mut self, every: u64) -> Self {
        self.eval_every = every.max(1);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Converged { step: u64 },
    Timeout,
    Diverged { step: u64 },
}

impl RunStatus {
    pub fn name(&self) -> &'static str {
        match self {
            RunStatus::Converged { .. } => "converged",
            RunStatus::Timeout => "timeout",
            RunStatus::Diverged { .. } => "diverged",
        }
    }

    pub fn steps(&self) -> Option<u64> {
        match *self {
            RunStatus::Converged { step } => Some(step),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub status: RunStatus,
    pub steps_run: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `losses[i]` is the loss after the i-th evaluation (index 0 = initial).
    pub losses: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub weights: ParamVector,
    pub state: OptimizerState,
}

impl RunResult {
    /// Placeholder with no data; handy in tests.
    pub fn empty() -> Self {
        RunResult {
            status: RunStatus::Timeout,
            steps_run: 0,
            initial_loss: 0.0,
            final_loss: 0.0,
            losses: Vec::new(),
            trace: Vec::new(),
            weights: ParamVector::default(),
            state: OptimizerState::new(Algorithm::Sgdm, 0, 1),
        }
    }
}

/// Hooks around each master update.
pub trait StepObserver {
    /// Called with the master state before step `t` and the gradient about
    /// to be applied.
    fn before_update(
        &mut self,
        _t: u64,
        _w: &ParamVector,
        _optimizer: &Optimizer,
        _g: &ParamVector,
        _stale: &ParamVector,
    ) {
    }

    fn after_update(&mut self, _t: u64, _w: &ParamVector, _optimizer: &Optimizer) {}
}

struct StopCheck {
    target: Option<f64>,
    threshold: f64,
}

impl StopCheck {
    fn new(initial: f64, target: Option<f64>, factor: f64) -> Self {
        StopCheck {
            target,
            threshold: factor * initial.max(f64::MIN_POSITIVE),
        }
    }

    fn check(&self, loss: f64, t: u64) -> Option<RunStatus> {
        if !loss.is_finite() || loss > self.threshold {
            return Some(RunStatus::Diverged { step: t });
        }
        match self.target {
            Some(target) if loss <= target => Some(RunStatus::Converged { step: t }),
            _ => None,
        }
    }
}

/// Classifies a recorded loss sequence (`losses[0]` = initial loss): the
/// first `t` with `loss ≤ target`, `Diverged` if the loss becomes
/// non-finite or exceeds `divergence_factor × initial` first, else `Timeout`.
pub fn steps_to_target(losses: &[f64], target: f64, divergence_factor: f64) -> RunStatus {
    let Some(&initial) = losses.first() else {
        return RunStatus::Timeout;
    };
    let stop = StopCheck::new(initial, Some(target), divergence_factor);
    for (t, &loss) in losses.iter().enumerate() {
        if let Some(status) = stop.check(loss, t as u64) {
            return status;
        }
    }
    RunStatus::Timeout
}

/// Runs round-robin asynchronous training for up to `spec.max_steps` steps.
pub fn run_async<O: GradientOracle + ?Sized>(
    oracle: &mut O,
    mut optimizer: Optimizer,
    w0: &ParamVector,
    delay: DelayConfig,
    spec: &RunSpec,
    mut observer: Option<&mut dyn StepObserver>,
) -> Result<RunResult> {
    if spec.max_steps < 1 {
        return Err(Error::config("max_steps", "must be >= 1"));
    }
    spec.schedule.validate()?;
    let n = w0.len();
    if oracle.dim() != n || optimizer.groups().len() != n {
        return Err(Error::contract(format!(
            "dimension mismatch: w0={n}, oracle={}, groups={}",
            oracle.dim(),
            optimizer.groups().len()
        )));
    }
    let workers = delay.num_workers();
    let algo = optimizer.config().algorithm;
    let state = optimizer.state();
    let slots = state
        .worker_velocities
        .as_ref()
        .map(Vec::len)
        .or_else(|| state.worker_iteration.as_ref().map(Vec::len));
    if let Some(s) = slots {
        if s != workers {
            return Err(Error::contract(format!(
                "{algo} optimizer was built for {s} workers, delay {} needs {workers}",
                delay.delay
            )));
        }
    }

    let base_eta = optimizer.config().eta;
    let mut w = w0.clone();
    let mut history = WeightHistory::new(w0, delay.delay);
    let mut g = ParamVector::zeros(n);
    let mut before = ParamVector::zeros(n);
    let mut diag = StepDiagnostics::with_capacity(optimizer.groups().num_groups());

    let initial_loss = oracle.loss(&w)?;
    let stop = StopCheck::new(initial_loss, spec.target_loss, spec.divergence_factor);
    let mut losses = Vec::new();
    if spec.record_losses {
        losses.push(initial_loss);
    }
    let mut trace = Vec::new();
    let mut status = RunStatus::Timeout;
    let mut final_loss = initial_loss;
    let mut steps_run = 0;

    match stop.check(initial_loss, 0) {
        Some(s @ RunStatus::Converged { .. }) => status = s,
        Some(_) => status = RunStatus::Diverged { step: 0 },
        None => {}
    }

    if status == RunStatus::Timeout {
        for t in 1..=spec.max_steps {
            let worker = delay.worker_for_step(t);
            let stale = history.oldest();
            match oracle.gradient(stale, worker, t, &mut g) {
                Ok(()) => {}
                Err(Error::NonFiniteActivation { .. }) => {
                    status = RunStatus::Diverged { step: t };
                    final_loss = f64::NAN;
                    break;
                }
                Err(e) => return Err(e),
            }

            let lr = base_eta * spec.schedule.multiplier(t);
            optimizer.set_eta(lr);
            let traced = spec.trace.records(t);
            if traced {
                before.copy_from(&w);
            }
            if let Some(obs) = observer.as_deref_mut() {
                obs.before_update(t, &w, &optimizer, &g, stale);
            }
            let ctx = UpdateContext {
                worker,
                stale_weights: stale,
            };
            let diag_slot = (traced && spec.trace_groups).then_some(&mut diag);
            optimizer.update(&mut w, &g, ctx, diag_slot)?;
            if let Some(obs) = observer.as_deref_mut() {
                obs.after_update(t, &w, &optimizer);
            }
            match optimizer.lookahead() {
                Some(ahead) => history.push(ahead),
                None => history.push(&w),
            }
            steps_run = t;

            let evaluate = traced || t % spec.eval_every == 0 || t == spec.max_steps;
            if !evaluate {
                continue;
            }
            let loss = oracle.loss(&w)?;
            final_loss = loss;
            if spec.record_losses {
                losses.push(loss);
            }
            if traced {
                let v = optimizer.state().active_velocity(worker);
                let v_sq = v.sq_norm();
                let energy = (!algo.per_worker_velocity()).then_some(loss + 0.5 * lr * v_sq);
                let (alpha, grad_norm, vel_norm, gvr) = if spec.trace_groups {
                    (
                        diag.alpha_per_group.clone(),
                        diag.grad_norm_per_group.clone(),
                        diag.vel_norm_per_group.clone(),
                        diag.gvr_per_group.clone(),
                    )
                } else {
                    Default::default()
                };
                trace.push(TraceRow {
                    step: t,
                    lr,
                    loss,
                    energy,
                    accuracy: oracle.accuracy(&w),
                    vel_norm_total: v_sq.sqrt(),
                    update_alignment: delta_alignment(&before, &w, &g),
                    alpha,
                    grad_norm,
                    vel_norm,
                    gvr,
                });
            }
            if let Some(s) = stop.check(loss, t) {
                status = s;
                break;
            }
        }
    }

    optimizer.set_eta(base_eta);
    Ok(RunResult {
        status,
        steps_run,
        initial_loss,
        final_loss,
        losses,
        trace,
        weights: w,
        state: optimizer.into_state(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_returns_initial_weights_during_warmup() {
        let w0 = ParamVector::from_vec(vec![0.0]);
        let mut h = WeightHistory::new(&w0, 3);
        for k in 1..=2 {
            h.push(&ParamVector::from_vec(vec![k as f64]));
            assert_eq!(h.oldest()[0], 0.0);
        }
        h.push(&ParamVector::from_vec(vec![3.0]));
        assert_eq!(h.oldest()[0], 0.0);
        h.push(&ParamVector::from_vec(vec![4.0]));
        assert_eq!(h.oldest()[0], 1.0);
        for offset in 0..=3 {
            assert_eq!(h.get(offset)[0], (4 - offset) as f64);
        }
    }

    #[test]
    fn zero_delay_history_is_current() {
        let mut h = WeightHistory::new(&ParamVector::from_vec(vec![1.0]), 0);
        h.push(&ParamVector::from_vec(vec![2.0]));
        assert_eq!(h.oldest()[0], 2.0);
    }

    #[test]
    fn round_robin_workers() {
        let d = DelayConfig::new(2);
        assert_eq!(d.num_workers(), 3);
        let ws: Vec<usize> = (1..=6).map(|t| d.worker_for_step(t)).collect();
        assert_eq!(ws, vec![1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn steps_to_target_closed_form() {
        // λ = 1, η = 0.5, m = 0, w0 = 1: loss_t = ½·0.25^t
        let losses: Vec<f64> = (0..10).map(|t| 0.5 * 0.25f64.powi(t)).collect();
        assert_eq!(steps_to_target(&losses, 0.01, 1e6), RunStatus::Converged { step: 3 });
        assert_eq!(steps_to_target(&losses, 0.6, 1e6), RunStatus::Converged { step: 0 });
        assert_eq!(steps_to_target(&losses, 1e-12, 1e6), RunStatus::Timeout);
        let growing: Vec<f64> = (0..40).map(|t| 0.5 * 2.25f64.powi(t)).collect();
        assert!(matches!(steps_to_target(&growing, 0.01, 1e6), RunStatus::Diverged { .. }));
        assert_eq!(
            steps_to_target(&[1.0, 0.5, f64::NAN, 0.0], 0.01, 1e6),
            RunStatus::Diverged { step: 2 }
        );
    }

    #[test]
    fn schedule_boundaries() {
        let s = LrSchedule::StepDecay {
            warmup_steps: 4,
            boundaries: vec![10, 20],
            factor: 0.1,
        };
        assert_eq!(s.multiplier(1), 0.25);
        assert_eq!(s.multiplier(4), 1.0);
        assert_eq!(s.multiplier(10), 1.0);
        assert!((s.multiplier(11) - 0.1).abs() < 1e-15);
        assert!((s.multiplier(20) - 0.1).abs() < 1e-15);
        assert!((s.multiplier(21) - 0.01).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.multiplier(12345), 1.0);
    }
}
