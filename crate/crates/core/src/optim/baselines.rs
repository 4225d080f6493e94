//! SGDM and the delay-mitigation baselines: staleness-aware learning-rate
//! division, shifted momentum, DANA look-ahead and delay compensation.

use super::{check_shapes, OptimizerConfig, OptimizerState, StepDiagnostics};
use crate::error::{Error, Result};
use crate::param::{sq_norm_slice, GroupSpec, ParamVector};

/// Heavy-ball momentum: `v ← m·v + g + λ·w`, `w ← w − η·v`.
pub fn sgdm_step(
    w: &mut ParamVector,
    state: &mut OptimizerState,
    g: &ParamVector,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_shapes(w, g, &state.velocity)?;
    momentum_kernel(w, state.velocity.as_mut_slice(), g, cfg.momentum, cfg.weight_decay, cfg.eta);
    state.step += 1;
    Ok(())
}

#[inline]
fn momentum_kernel(w: &mut [f64], v: &mut [f64], g: &[f64], m: f64, lambda: f64, lr: f64) {
    for ((wk, vk), gk) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *vk = m * *vk + gk + lambda * *wk;
        *wk -= lr * *vk;
    }
}

/// SGDM with the learning rate divided by the gradient's staleness. A
/// staleness of 0 is treated as 1.
pub fn sa_step(
    w: &mut ParamVector,
    state: &mut OptimizerState,
    g: &ParamVector,
    cfg: &OptimizerConfig,
    delay: u64,
) -> Result<()> {
    check_shapes(w, g, &state.velocity)?;
    let lr = cfg.eta / delay.max(1) as f64;
    momentum_kernel(w, state.velocity.as_mut_slice(), g, cfg.momentum, cfg.weight_decay, lr);
    state.step += 1;
    Ok(())
}

fn worker_slot<'a>(
    state: &'a mut OptimizerState,
    worker: usize,
    algo: &str,
) -> Result<&'a mut ParamVector> {
    let slots = state
        .worker_velocities
        .as_mut()
        .ok_or_else(|| Error::contract(format!("{algo} state has no per-worker velocities")))?;
    let n = slots.len();
    slots
        .get_mut(worker)
        .ok_or_else(|| Error::contract(format!("worker {worker} out of range for {n} workers")))
}

/// Shifted momentum: only worker `worker`'s velocity is advanced, and the
/// master steps along it.
pub fn sm_step(
    w: &mut ParamVector,
    state: &mut OptimizerState,
    worker: usize,
    g: &ParamVector,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let v = worker_slot(state, worker, "SM")?;
    check_shapes(w, g, v)?;
    momentum_kernel(w, v.as_mut_slice(), g, cfg.momentum, cfg.weight_decay, cfg.eta);
    state.step += 1;
    Ok(())
}

/// `w − η·m·Σ_j v_j` written into `out`.
pub fn dana_lookahead(
    w: &ParamVector,
    velocities: &[ParamVector],
    eta: f64,
    momentum: f64,
    out: &mut ParamVector,
) -> Result<()> {
    if out.len() != w.len() || velocities.iter().any(|v| v.len() != w.len()) {
        return Err(Error::contract("shape mismatch in DANA look-ahead"));
    }
    let scale = eta * momentum;
    for k in 0..w.len() {
        let sum: f64 = velocities.iter().map(|v| v[k]).sum();
        out[k] = w[k] - scale * sum;
    }
    Ok(())
}

/// DANA: shifted-momentum update of the master, then the look-ahead
/// weights `ŵ = w − η·m·Σ_j v_j` (from the updated master weights) are
/// written to `lookahead`. The harness hands `ŵ` to the next worker.
pub fn dana_step(
    w: &mut ParamVector,
    state: &mut OptimizerState,
    worker: usize,
    g: &ParamVector,
    cfg: &OptimizerConfig,
    lookahead: &mut ParamVector,
) -> Result<()> {
    sm_step(w, state, worker, g, cfg)?;
    let velocities = state
        .worker_velocities
        .as_deref()
        .ok_or_else(|| Error::contract("DANA state has no per-worker velocities"))?;
    dana_lookahead(w, velocities, cfg.eta, cfg.momentum, lookahead)
}

/// One coordinate of the delay-compensated gradient `g + λ·g²·(w − w_stale)`.
#[inline]
pub fn dc_compensated(g: f64, lambda: f64, drift: f64) -> f64 {
    g + lambda * (g * g) * drift
}

/// Delay-compensated SGDM. λ is adaptive per coordinate:
/// `λ = λ₀ / (√M + ε)` with `M ← θ·M + (1−θ)·g²`.
pub fn dc_step(
    w: &mut ParamVector,
    state: &mut OptimizerState,
    g: &ParamVector,
    cfg: &OptimizerConfig,
    stale_w: &ParamVector,
) -> Result<()> {
    check_shapes(w, g, &state.velocity)?;
    if stale_w.len() != w.len() {
        return Err(Error::contract("stale weights have the wrong length"));
    }
    let second = state
        .dc_second_moment
        .as_mut()
        .ok_or_else(|| Error::contract("DC state has no second-moment buffer"))?;
    let (m, lambda, eta, theta) = (cfg.momentum, cfg.weight_decay, cfg.eta, cfg.dc_theta);
    let v = state.velocity.as_mut_slice();
    for k in 0..w.len() {
        let gk = g[k];
        second[k] = theta * second[k] + (1.0 - theta) * gk * gk;
        let lam = cfg.dc_lambda0 / (second[k].sqrt() + cfg.epsilon);
        let comp = dc_compensated(gk, lam, w[k] - stale_w[k]);
        v[k] = m * v[k] + comp + lambda * w[k];
        w[k] -= eta * v[k];
    }
    state.step += 1;
    Ok(())
}

/// Norms and GVR for algorithms without braking; α is reported as 1.
pub(crate) fn plain_diagnostics(
    g: &ParamVector,
    v: &ParamVector,
    groups: &GroupSpec,
    out: &mut StepDiagnostics,
) {
    out.clear();
    for r in groups.iter() {
        let gn = sq_norm_slice(&g[r.clone()]).sqrt();
        let vn = sq_norm_slice(&v[r]).sqrt();
        out.push(1.0, gn, vn);
    }
}
