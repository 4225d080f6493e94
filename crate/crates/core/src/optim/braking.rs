//! Adaptive braking: scale the gradient of each parameter group by
//! `α = 1 − ρ·cos∠(g, v)` before it enters the momentum update.

use std::ops::Range;

use super::{check_shapes, OptimizerConfig, OptimizerState, StepDiagnostics};
use crate::error::{Error, Result};
use crate::param::{dot_slice, sq_norm_slice, GroupSpec, ParamVector};

/// α from the inner product and the two norms. The cosine is clamped to
/// [-1, 1] so rounding in the norms can never push α outside [1−ρ, 1+ρ];
/// α itself is not clamped.
#[inline]
pub(crate) fn alpha_from_parts(gv: f64, g_norm: f64, v_norm: f64, rho: f64, epsilon: f64) -> f64 {
    let denom = (g_norm * v_norm).max(epsilon);
    let cos = (gv / denom).clamp(-1.0, 1.0);
    1.0 - rho * cos
}

/// Cosine computed on max-abs-rescaled copies; used when the plain sums
/// overflow. The true norm product is then far above any ε.
fn rescaled_cosine(gs: &[f64], vs: &[f64]) -> f64 {
    let max_abs = |xs: &[f64]| xs.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let (sg, sv) = (max_abs(gs), max_abs(vs));
    if sg == 0.0 || sv == 0.0 {
        return 0.0;
    }
    let (mut gv, mut gg, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in gs.iter().zip(vs) {
        let (x, y) = (a / sg, b / sv);
        gv += x * y;
        gg += x * x;
        vv += y * y;
    }
    (gv / (gg.sqrt() * vv.sqrt())).clamp(-1.0, 1.0)
}

/// α for one group plus the group's gradient and velocity norms.
#[inline]
pub(crate) fn group_alpha(gs: &[f64], vs: &[f64], rho: f64, epsilon: f64) -> (f64, f64, f64) {
    let gv = dot_slice(gs, vs);
    let g_norm = sq_norm_slice(gs).sqrt();
    let v_norm = sq_norm_slice(vs).sqrt();
    let mut alpha = alpha_from_parts(gv, g_norm, v_norm, rho, epsilon);
    if alpha.is_nan() {
        alpha = 1.0 - rho * rescaled_cosine(gs, vs);
    }
    (alpha, g_norm, v_norm)
}

/// `1 − ρ⟨g,v⟩ / max(‖g‖‖v‖, ε)` over `group`.
pub fn compute_alpha(
    g: &ParamVector,
    v: &ParamVector,
    group: Range<usize>,
    rho: f64,
    epsilon: f64,
) -> Result<f64> {
    if g.len() != v.len() {
        return Err(Error::contract(format!(
            "length mismatch in compute_alpha: {} vs {}",
            g.len(),
            v.len()
        )));
    }
    if group.start >= group.end || group.end > g.len() {
        return Err(Error::contract(format!("invalid group {group:?}")));
    }
    Ok(group_alpha(&g[group.clone()], &v[group], rho, epsilon).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Variant {
    /// Scaled gradient in both the velocity and the weight update.
    Full,
    /// Scaled gradient stored in the velocity; weights move by the unscaled step.
    VelOnly,
    /// Plain velocity; weights move by the scaled step.
    WeightOnly,
}

fn check_groups(groups: &GroupSpec, len: usize) -> Result<()> {
    if groups.len() != len {
        return Err(Error::contract(format!(
            "group layout covers {} parameters, vector has {len}",
            groups.len()
        )));
    }
    groups.validate()
}

pub(crate) fn braked_update(
    w: &mut ParamVector,
    state: &mut OptimizerState,
    g: &ParamVector,
    cfg: &OptimizerConfig,
    groups: &GroupSpec,
    variant: Variant,
    mut diag: Option<&mut StepDiagnostics>,
) -> Result<()> {
    check_shapes(w, g, &state.velocity)?;
    check_groups(groups, w.len())?;
    if let Some(d) = diag.as_deref_mut() {
        d.clear();
    }
    let (eta, m, lambda) = (cfg.eta, cfg.momentum, cfg.weight_decay);
    let v = state.velocity.as_mut_slice();
    let w = w.as_mut_slice();

    for r in groups.iter() {
        let (alpha, g_norm, v_norm) = group_alpha(&g[r.clone()], &v[r.clone()], cfg.rho, cfg.epsilon);
        if let Some(d) = diag.as_deref_mut() {
            d.push(alpha, g_norm, v_norm);
        }

        match variant {
            Variant::Full => {
                for k in r {
                    v[k] = m * v[k] + alpha * g[k] + lambda * w[k];
                    w[k] -= eta * v[k];
                }
            }
            Variant::VelOnly => {
                for k in r {
                    let mv = m * v[k];
                    let decay = lambda * w[k];
                    let step = mv + g[k] + decay;
                    v[k] = mv + alpha * g[k] + decay;
                    w[k] -= eta * step;
                }
            }
            Variant::WeightOnly => {
                for k in r {
                    let mv = m * v[k];
                    let decay = lambda * w[k];
                    let step = mv + alpha * g[k] + decay;
                    v[k] = mv + g[k] + decay;
                    w[k] -= eta * step;
                }
            }
        }
    }
    state.step += 1;
    Ok(())
}

/// Velocity update split into `S` sub-steps, each re-evaluating α against
/// the current velocity. The velocity inside the loop is always
/// `m·v + (Σα/S)·g`, so it is tracked through the running sum of α rather
/// than by repeated accumulation into `v`.
pub(crate) fn microstep_update(
    w: &mut ParamVector,
    state: &mut OptimizerState,
    g: &ParamVector,
    cfg: &OptimizerConfig,
    groups: &GroupSpec,
    mut diag: Option<&mut StepDiagnostics>,
) -> Result<()> {
    if cfg.micro_steps < 1 {
        return Err(Error::config("micro_steps", "must be >= 1"));
    }
    check_shapes(w, g, &state.velocity)?;
    check_groups(groups, w.len())?;
    if let Some(d) = diag.as_deref_mut() {
        d.clear();
    }
    let (eta, m, lambda) = (cfg.eta, cfg.momentum, cfg.weight_decay);
    let s = cfg.micro_steps as f64;
    let v = state.velocity.as_mut_slice();
    let w = w.as_mut_slice();

    for r in groups.iter() {
        let g_norm = sq_norm_slice(&g[r.clone()]).sqrt();
        let pre_norm = sq_norm_slice(&v[r.clone()]).sqrt();
        for k in r.clone() {
            v[k] *= m;
        }
        let mut alpha_sum = 0.0;
        for _ in 0..cfg.micro_steps {
            let c = alpha_sum / s;
            let mut gv = 0.0;
            let mut vv = 0.0;
            for k in r.clone() {
                let cur = v[k] + c * g[k];
                gv += cur * g[k];
                vv += cur * cur;
            }
            let mut a = alpha_from_parts(gv, g_norm, vv.sqrt(), cfg.rho, cfg.epsilon);
            if a.is_nan() {
                let cur: Vec<f64> = r.clone().map(|k| v[k] + c * g[k]).collect();
                a = group_alpha(&g[r.clone()], &cur, cfg.rho, cfg.epsilon).0;
            }
            alpha_sum += a;
        }
        let scale = alpha_sum / s;
        if let Some(d) = diag.as_deref_mut() {
            d.push(scale, g_norm, pre_norm);
        }
        for k in r {
            v[k] = v[k] + scale * g[k] + lambda * w[k];
            w[k] -= eta * v[k];
        }
    }
    state.step += 1;
    Ok(())
}

/// SGDM + adaptive braking. Returns the per-group diagnostics.
pub fn ab_step(
    w: &mut ParamVector,
    state: &mut OptimizerState,
    g: &ParamVector,
    cfg: &OptimizerConfig,
    groups: &GroupSpec,
) -> Result<StepDiagnostics> {
    let mut d = StepDiagnostics::with_capacity(groups.num_groups());
    braked_update(w, state, g, cfg, groups, Variant::Full, Some(&mut d))?;
    Ok(d)
}

/// Braking applied to the stored velocity only.
pub fn ab_vel_only_step(
    w: &mut ParamVector,
    state: &mut OptimizerState,
    g: &ParamVector,
    cfg: &OptimizerConfig,
    groups: &GroupSpec,
) -> Result<StepDiagnostics> {
    let mut d = StepDiagnostics::with_capacity(groups.num_groups());
    braked_update(w, state, g, cfg, groups, Variant::VelOnly, Some(&mut d))?;
    Ok(d)
}

/// Braking applied to the weight step only.
pub fn ab_weight_only_step(
    w: &mut ParamVector,
    state: &mut OptimizerState,
    g: &ParamVector,
    cfg: &OptimizerConfig,
    groups: &GroupSpec,
) -> Result<StepDiagnostics> {
    let mut d = StepDiagnostics::with_capacity(groups.num_groups());
    braked_update(w, state, g, cfg, groups, Variant::WeightOnly, Some(&mut d))?;
    Ok(d)
}

/// Micro-stepped braking with `cfg.micro_steps` sub-steps. The reported
/// α per group is the mean of the sub-step factors.
pub fn ab_microstep(
    w: &mut ParamVector,
    state: &mut OptimizerState,
    g: &ParamVector,
    cfg: &OptimizerConfig,
    groups: &GroupSpec,
) -> Result<StepDiagnostics> {
    let mut d = StepDiagnostics::with_capacity(groups.num_groups());
    microstep_update(w, state, g, cfg, groups, Some(&mut d))?;
    Ok(d)
}
