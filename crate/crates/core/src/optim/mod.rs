//! Update rules for momentum SGD under gradient delay.
//!
//! Each rule is an in-place state transition on `(w, state)` given a
//! gradient. [`Optimizer`] bundles a config, a group layout and state and
//! dispatches to the right rule; the free functions are the individual
//! rules.
//!
//! Weight decay is added to the velocity for every algorithm, after any
//! gradient scaling, so the cosine in adaptive braking only ever sees the
//! raw gradient.

mod baselines;
mod braking;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{GroupSpec, ParamVector};

pub use baselines::{
    dana_lookahead, dana_step, dc_compensated, dc_step, sa_step, sgdm_step, sm_step,
};
pub use braking::{
    ab_microstep, ab_step, ab_vel_only_step, ab_weight_only_step, compute_alpha,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Algorithm {
    Sgdm,
    Ab,
    AbVelOnly,
    AbWeightOnly,
    AbMicroStep,
    Sa,
    Sm,
    Dana,
    Dc,
}

impl Algorithm {
    pub const ALL: [Algorithm; 9] = [
        Algorithm::Sgdm,
        Algorithm::Ab,
        Algorithm::AbVelOnly,
        Algorithm::AbWeightOnly,
        Algorithm::AbMicroStep,
        Algorithm::Sa,
        Algorithm::Sm,
        Algorithm::Dana,
        Algorithm::Dc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sgdm => "sgdm",
            Algorithm::Ab => "ab",
            Algorithm::AbVelOnly => "ab_vel_only",
            Algorithm::AbWeightOnly => "ab_weight_only",
            Algorithm::AbMicroStep => "ab_microstep",
            Algorithm::Sa => "sa",
            Algorithm::Sm => "sm",
            Algorithm::Dana => "dana",
            Algorithm::Dc => "dc",
        }
    }

    /// Algorithms that compute a braking factor per group.
    pub fn is_braking(self) -> bool {
        matches!(
            self,
            Algorithm::Ab | Algorithm::AbVelOnly | Algorithm::AbWeightOnly | Algorithm::AbMicroStep
        )
    }

    /// Algorithms that keep one velocity per worker.
    pub fn per_worker_velocity(self) -> bool {
        matches!(self, Algorithm::Sm | Algorithm::Dana)
    }

    pub fn valid_names() -> String {
        Algorithm::ALL
            .iter()
            .map(|a| a.name())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    /// Case-insensitive; underscores and dashes are ignored, so `AB_VelOnly`,
    /// `ab-vel-only` and `ab_vel_only` all parse.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        let alg = match key.as_str() {
            "sgdm" | "asgd" => Algorithm::Sgdm,
            "ab" => Algorithm::Ab,
            "abvelonly" => Algorithm::AbVelOnly,
            "abweightonly" => Algorithm::AbWeightOnly,
            "abmicrostep" | "abmicrostepping" => Algorithm::AbMicroStep,
            "sa" => Algorithm::Sa,
            "sm" => Algorithm::Sm,
            "dana" => Algorithm::Dana,
            "dc" => Algorithm::Dc,
            _ => {
                return Err(Error::config(
                    "algorithm",
                    format!("unknown algorithm `{s}` (valid: {})", Algorithm::valid_names()),
                ))
            }
        };
        Ok(alg)
    }
}

impl TryFrom<String> for Algorithm {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Algorithm> for String {
    fn from(a: Algorithm) -> String {
        a.name().to_string()
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_DC_LAMBDA0: f64 = 2.0;
pub const DEFAULT_DC_THETA: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub momentum: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub micro_steps: u32,
    pub dc_lambda0: f64,
    pub dc_theta: f64,
}

impl OptimizerConfig {
    pub fn new(algorithm: Algorithm, eta: f64, momentum: f64) -> Self {
        OptimizerConfig {
            algorithm,
            eta,
            momentum,
            rho: 0.5,
            epsilon: DEFAULT_EPSILON,
            weight_decay: 0.0,
            micro_steps: 1,
            dc_lambda0: DEFAULT_DC_LAMBDA0,
            dc_theta: DEFAULT_DC_THETA,
        }
    }

    pub fn sgdm(eta: f64, momentum: f64) -> Self {
        Self::new(Algorithm::Sgdm, eta, momentum)
    }

    pub fn with_algorithm(mut self, algorithm: Algorithm) -> Self {
        self.algorithm = algorithm;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn with_micro_steps(mut self, micro_steps: u32) -> Self {
        self.micro_steps = micro_steps;
        self
    }

    pub fn with_dc(mut self, lambda0: f64, theta: f64) -> Self {
        self.dc_lambda0 = lambda0;
        self.dc_theta = theta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::config("eta", format!("must be > 0, got {}", self.eta)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(Error::config("rho", format!("must be >= 0, got {}", self.rho)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config(
                "epsilon",
                format!("must be > 0, got {}", self.epsilon),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(
                "weight_decay",
                format!("must be >= 0, got {}", self.weight_decay),
            ));
        }
        if self.micro_steps < 1 {
            return Err(Error::config("micro_steps", "must be >= 1"));
        }
        if !(self.dc_lambda0.is_finite() && self.dc_lambda0 >= 0.0) {
            return Err(Error::config(
                "dc_lambda0",
                format!("must be >= 0, got {}", self.dc_lambda0),
            ));
        }
        if !(self.dc_theta > 0.0 && self.dc_theta < 1.0) {
            return Err(Error::config(
                "dc_theta",
                format!("must lie in (0, 1), got {}", self.dc_theta),
            ));
        }
        Ok(())
    }
}

/// Mutable optimizer state. Which optional parts exist depends on the algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: ParamVector,
    /// One velocity per worker (SM, DANA).
    pub worker_velocities: Option<Vec<ParamVector>>,
    /// Running average of g⊙g for DC's adaptive λ.
    pub dc_second_moment: Option<ParamVector>,
    /// Step at which each worker last contributed (SA).
    pub worker_iteration: Option<Vec<u64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(algorithm: Algorithm, num_params: usize, num_workers: usize) -> Self {
        OptimizerState {
            velocity: ParamVector::zeros(num_params),
            worker_velocities: algorithm
                .per_worker_velocity()
                .then(|| vec![ParamVector::zeros(num_params); num_workers.max(1)]),
            dc_second_moment: (algorithm == Algorithm::Dc).then(|| ParamVector::zeros(num_params)),
            worker_iteration: (algorithm == Algorithm::Sa).then(|| vec![0; num_workers.max(1)]),
            step: 0,
        }
    }

    /// The velocity an update for `worker` reads and writes.
    pub fn active_velocity(&self, worker: usize) -> &ParamVector {
        match &self.worker_velocities {
            Some(vs) => &vs[worker],
            None => &self.velocity,
        }
    }
}

/// Per-group diagnostics of one update, measured before the velocity changes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepDiagnostics {
    pub alpha_per_group: Vec<f64>,
    pub grad_norm_per_group: Vec<f64>,
    pub vel_norm_per_group: Vec<f64>,
    pub gvr_per_group: Vec<f64>,
}

impl StepDiagnostics {
    pub fn with_capacity(groups: usize) -> Self {
        StepDiagnostics {
            alpha_per_group: Vec::with_capacity(groups),
            grad_norm_per_group: Vec::with_capacity(groups),
            vel_norm_per_group: Vec::with_capacity(groups),
            gvr_per_group: Vec::with_capacity(groups),
        }
    }

    pub fn clear(&mut self) {
        self.alpha_per_group.clear();
        self.grad_norm_per_group.clear();
        self.vel_norm_per_group.clear();
        self.gvr_per_group.clear();
    }

    pub(crate) fn push(&mut self, alpha: f64, grad_norm: f64, vel_norm: f64) {
        self.alpha_per_group.push(alpha);
        self.grad_norm_per_group.push(grad_norm);
        self.vel_norm_per_group.push(vel_norm);
        self.gvr_per_group.push(crate::metrics::gvr_from_norms(grad_norm, vel_norm));
    }

    pub fn num_groups(&self) -> usize {
        self.alpha_per_group.len()
    }
}

/// Routing information the master has for one incoming gradient.
#[derive(Debug, Clone, Copy)]
pub struct UpdateContext<'a> {
    pub worker: usize,
    /// Weights the gradient was computed on.
    pub stale_weights: &'a ParamVector,
}

/// Config + groups + state for one run.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    groups: GroupSpec,
    state: OptimizerState,
    lookahead: Option<ParamVector>,
}

pub(crate) fn check_shapes(w: &ParamVector, g: &ParamVector, v: &ParamVector) -> Result<()> {
    if w.len() != g.len() || w.len() != v.len() {
        return Err(Error::contract(format!(
            "shape mismatch: w={}, g={}, v={}",
            w.len(),
            g.len(),
            v.len()
        )));
    }
    if w.is_empty() {
        return Err(Error::contract("empty parameter vector"));
    }
    Ok(())
}

impl Optimizer {
    pub fn new(
        config: OptimizerConfig,
        groups: GroupSpec,
        num_params: usize,
        num_workers: usize,
    ) -> Result<Self> {
        config.validate()?;
        groups.validate()?;
        if groups.len() != num_params {
            return Err(Error::contract(format!(
                "group layout covers {} parameters, model has {num_params}",
                groups.len()
            )));
        }
        let state = OptimizerState::new(config.algorithm, num_params, num_workers);
        Ok(Optimizer {
            config,
            groups,
            state,
            lookahead: None,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Learning-rate schedules adjust `eta` between steps through this.
    pub fn set_eta(&mut self, eta: f64) {
        self.config.eta = eta;
    }

    pub fn groups(&self) -> &GroupSpec {
        &self.groups
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn into_state(self) -> OptimizerState {
        self.state
    }

    /// DANA's look-ahead weights from the last update; `None` before the
    /// first update, when the look-ahead equals the master weights.
    pub fn lookahead(&self) -> Option<&ParamVector> {
        self.lookahead.as_ref()
    }

    /// Applies one master update. When `diag` is given it is overwritten
    /// with per-group diagnostics (α is 1 for non-braking algorithms).
    pub fn update(
        &mut self,
        w: &mut ParamVector,
        g: &ParamVector,
        ctx: UpdateContext<'_>,
        diag: Option<&mut StepDiagnostics>,
    ) -> Result<()> {
        let cfg = self.config;
        let workers = self
            .state
            .worker_velocities
            .as_ref()
            .map(|v| v.len())
            .or_else(|| self.state.worker_iteration.as_ref().map(|v| v.len()));
        if let Some(n) = workers {
            if ctx.worker >= n {
                return Err(Error::contract(format!(
                    "worker {} out of range for {n} workers",
                    ctx.worker
                )));
            }
        }

        let mut diag = diag;
        if !cfg.algorithm.is_braking() {
            if let Some(d) = diag.as_deref_mut() {
                baselines::plain_diagnostics(g, self.state.active_velocity(ctx.worker), &self.groups, d);
            }
        }

        match cfg.algorithm {
            Algorithm::Sgdm => sgdm_step(w, &mut self.state, g, &cfg),
            Algorithm::Ab | Algorithm::AbVelOnly | Algorithm::AbWeightOnly => {
                let variant = match cfg.algorithm {
                    Algorithm::Ab => braking::Variant::Full,
                    Algorithm::AbVelOnly => braking::Variant::VelOnly,
                    _ => braking::Variant::WeightOnly,
                };
                braking::braked_update(w, &mut self.state, g, &cfg, &self.groups, variant, diag)
            }
            Algorithm::AbMicroStep => {
                braking::microstep_update(w, &mut self.state, g, &cfg, &self.groups, diag)
            }
            Algorithm::Sa => {
                let t = self.state.step + 1;
                let iter = self
                    .state
                    .worker_iteration
                    .as_mut()
                    .ok_or_else(|| Error::contract("SA state lacks the iteration array"))?;
                let delay = t - iter[ctx.worker];
                iter[ctx.worker] = t;
                sa_step(w, &mut self.state, g, &cfg, delay)
            }
            Algorithm::Sm => sm_step(w, &mut self.state, ctx.worker, g, &cfg),
            Algorithm::Dana => {
                let lookahead = self.lookahead.get_or_insert_with(|| ParamVector::zeros(w.len()));
                dana_step(w, &mut self.state, ctx.worker, g, &cfg, lookahead)
            }
            Algorithm::Dc => dc_step(w, &mut self.state, g, &cfg, ctx.stale_weights),
        }
    }
}
