//! Noisy quadratic model: `L(w) = ½ Σ λ_k u_k²` with `u = Q·w` (Q = I when
//! unrotated), and gradients `H·w + σ·N(0, H)`.
//!
//! Also hosts the energy measure `E = L(w) + ½·η·‖v‖²` and the relative
//! energy decay of a trajectory against counterfactual SGDM steps.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::harness::{run_async, DelayConfig, GradientOracle, RunResult, RunSpec, StepObserver};
use crate::optim::{sgdm_step, Algorithm, Optimizer, OptimizerState};
use crate::param::ParamVector;
use crate::rng::Rng;

/// `λ_j = 1/j` for `j = 1..=n`.
pub fn make_inverse_spectrum(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::config("dim", "must be >= 1"));
    }
    Ok((1..=n).map(|j| 1.0 / j as f64).collect())
}

/// `n` values evenly spaced in log space from `lo` to `hi` inclusive.
pub fn make_loguniform_spectrum(n: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::config("dim", "must be >= 1"));
    }
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::config("spectrum", format!("need 0 < lo <= hi, got lo={lo} hi={hi}")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.log10(), hi.log10());
    let mut out: Vec<f64> = (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect();
    out[0] = lo;
    out[n - 1] = hi;
    Ok(out)
}

/// Dense orthogonal matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation {
    n: usize,
    q: Vec<f64>,
}

impl Rotation {
    /// QR of a Gaussian matrix with the signs fixed so `R` has a positive
    /// diagonal, which makes `Q` Haar-distributed and deterministic in `rng`.
    pub fn random(n: usize, rng: &mut Rng) -> Self {
        let a = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
        let qr = a.qr();
        let mut q = qr.q();
        let r = qr.r();
        for j in 0..n {
            if r[(j, j)] < 0.0 {
                for i in 0..n {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(q[(i, j)]);
            }
        }
        Rotation { n, q: data }
    }

    pub fn from_row_major(n: usize, q: Vec<f64>) -> Result<Self> {
        if q.len() != n * n {
            return Err(Error::contract("rotation matrix has the wrong size"));
        }
        let rot = Rotation { n, q };
        let err = rot.orthogonality_error();
        if err >= 1e-10 {
            return Err(Error::contract(format!("matrix is not orthogonal (max |QᵀQ − I| = {err:e})")));
        }
        Ok(rot)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// `max |QᵀQ − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0f64;
        for a in 0..n {
            for b in 0..n {
                let s: f64 = (0..n).map(|i| self.q[i * n + a] * self.q[i * n + b]).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((s - target).abs());
            }
        }
        worst
    }

    /// `out = Q·x`
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.q[i * n..(i + 1) * n];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `out = Qᵀ·x`
    pub fn apply_transpose(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.q[i * n..(i + 1) * n];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * xi;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    eigenvalues: Vec<f64>,
    sqrt_eigenvalues: Vec<f64>,
    rotation: Option<Rotation>,
    noise_sigma: f64,
    w0: ParamVector,
    target_loss: f64,
}

/// Energy split over eigen-components.
#[derive(Debug, Clone, PartialEq)]
pub struct Energy {
    pub total: f64,
    pub components: Vec<f64>,
}

impl QuadraticProblem {
    pub fn new(eigenvalues: Vec<f64>, noise_sigma: f64, w0: ParamVector, target_loss: f64) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::config("dim", "must be >= 1"));
        }
        if let Some(bad) = eigenvalues.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::config("eigenvalues", format!("must all be > 0, found {bad}")));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be >= 0"));
        }
        if !(target_loss > 0.0) {
            return Err(Error::config("target_loss", "must be > 0"));
        }
        if w0.len() != eigenvalues.len() {
            return Err(Error::contract("w0 and the spectrum differ in length"));
        }
        let sqrt_eigenvalues = eigenvalues.iter().map(|l| l.sqrt()).collect();
        Ok(QuadraticProblem {
            eigenvalues,
            sqrt_eigenvalues,
            rotation: None,
            noise_sigma,
            w0,
            target_loss,
        })
    }

    /// Axis-aligned problem started from `w = 1`.
    pub fn from_spectrum(eigenvalues: Vec<f64>, noise_sigma: f64, target_loss: f64) -> Result<Self> {
        let n = eigenvalues.len();
        Self::new(eigenvalues, noise_sigma, ParamVector::filled(n, 1.0), target_loss)
    }

    /// The same problem seen through `rotation`: loss `½(Qw)ᵀH(Qw)`, started
    /// from `Qᵀ·w0` so that eigen-coordinates coincide at t = 0.
    pub fn rotated(&self, rotation: Rotation) -> Result<Self> {
        if rotation.dim() != self.dim() {
            return Err(Error::contract("rotation size does not match the problem"));
        }
        if self.rotation.is_some() {
            return Err(Error::contract("problem is already rotated"));
        }
        let mut w0 = ParamVector::zeros(self.dim());
        rotation.apply_transpose(&self.w0, &mut w0);
        Ok(QuadraticProblem {
            w0,
            rotation: Some(rotation),
            ..self.clone()
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn rotation(&self) -> Option<&Rotation> {
        self.rotation.as_ref()
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn w0(&self) -> &ParamVector {
        &self.w0
    }

    pub fn target_loss(&self) -> f64 {
        self.target_loss
    }

    /// Eigen-coordinates `Q·w` (a copy of `w` when unrotated).
    pub fn to_eigenbasis(&self, w: &[f64]) -> Vec<f64> {
        match &self.rotation {
            Some(q) => {
                let mut u = vec![0.0; w.len()];
                q.apply(w, &mut u);
                u
            }
            None => w.to_vec(),
        }
    }

    pub fn loss(&self, w: &ParamVector) -> Result<f64> {
        if w.len() != self.dim() {
            return Err(Error::contract("weight vector has the wrong length"));
        }
        Ok(match &self.rotation {
            None => diag_loss(&self.eigenvalues, w),
            Some(_) => diag_loss(&self.eigenvalues, &self.to_eigenbasis(w)),
        })
    }

    /// Gradient at `w` plus `σ·N(0, H)` noise drawn from `rng`.
    pub fn gradient(&self, w: &ParamVector, rng: &mut Rng, out: &mut ParamVector) -> Result<()> {
        if w.len() != self.dim() || out.len() != self.dim() {
            return Err(Error::contract("gradient buffers have the wrong length"));
        }
        let sigma = self.noise_sigma;
        match &self.rotation {
            None => {
                for k in 0..w.len() {
                    out[k] = self.eigenvalues[k] * w[k];
                }
                if sigma > 0.0 {
                    for k in 0..w.len() {
                        out[k] += sigma * self.sqrt_eigenvalues[k] * rng.standard_normal();
                    }
                }
            }
            Some(q) => {
                let mut h = vec![0.0; w.len()];
                q.apply(w, &mut h);
                for (hk, lam) in h.iter_mut().zip(&self.eigenvalues) {
                    *hk *= lam;
                }
                if sigma > 0.0 {
                    for (hk, s) in h.iter_mut().zip(&self.sqrt_eigenvalues) {
                        *hk += sigma * s * rng.standard_normal();
                    }
                }
                q.apply_transpose(&h, out);
            }
        }
        Ok(())
    }

    /// `L(w) + ½·η·‖v‖²` with its per-eigen-component breakdown
    /// `½λ_k u_k² + ½η (Qv)_k²`.
    pub fn energy(&self, w: &ParamVector, v: &ParamVector, eta: f64) -> Result<Energy> {
        if !(eta > 0.0) {
            return Err(Error::config("eta", "must be > 0"));
        }
        if w.len() != self.dim() || v.len() != self.dim() {
            return Err(Error::contract("energy inputs have the wrong length"));
        }
        let u = self.to_eigenbasis(w);
        let vu = self.to_eigenbasis(v);
        let components: Vec<f64> = (0..self.dim())
            .map(|k| 0.5 * self.eigenvalues[k] * u[k] * u[k] + 0.5 * eta * vu[k] * vu[k])
            .collect();
        let total = self.loss(w)? + 0.5 * eta * v.sq_norm();
        Ok(Energy { total, components })
    }
}

fn diag_loss(eigenvalues: &[f64], u: &[f64]) -> f64 {
    0.5 * eigenvalues.iter().zip(u).map(|(l, x)| l * x * x).sum::<f64>()
}

/// Gradient oracle over a shared [`QuadraticProblem`] with a private noise stream.
#[derive(Debug, Clone)]
pub struct NqmOracle<'a> {
    problem: &'a QuadraticProblem,
    rng: Rng,
}

impl<'a> NqmOracle<'a> {
    pub fn new(problem: &'a QuadraticProblem, rng: Rng) -> Self {
        NqmOracle { problem, rng }
    }
}

impl GradientOracle for NqmOracle<'_> {
    fn dim(&self) -> usize {
        self.problem.dim()
    }

    fn gradient(&mut self, w: &ParamVector, _worker: usize, _step: u64, out: &mut ParamVector) -> Result<()> {
        self.problem.gradient(w, &mut self.rng, out)
    }

    fn loss(&self, w: &ParamVector) -> Result<f64> {
        self.problem.loss(w)
    }
}

/// Geometric-mean ratio of actual to counterfactual-SGDM next-state energy.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyDecay {
    pub eigenvalues: Vec<f64>,
    pub geomean_ratio: Vec<f64>,
    /// Steps skipped per component because either energy was exactly zero.
    pub excluded: Vec<u64>,
    pub total_geomean_ratio: f64,
    pub total_excluded: u64,
    pub steps: u64,
}

struct DecayObserver<'a> {
    problem: &'a QuadraticProblem,
    counterfactual: Option<Energy>,
    log_sum: Vec<f64>,
    counts: Vec<u64>,
    excluded: Vec<u64>,
    total_log_sum: f64,
    total_count: u64,
    total_excluded: u64,
    steps: u64,
    error: Option<Error>,
}

impl DecayObserver<'_> {
    fn accumulate(sum: &mut f64, count: &mut u64, excluded: &mut u64, actual: f64, reference: f64) {
        let ratio = actual / reference;
        if reference == 0.0 || actual == 0.0 || !ratio.is_finite() {
            *excluded += 1;
        } else {
            *sum += ratio.ln();
            *count += 1;
        }
    }
}

impl StepObserver for DecayObserver<'_> {
    fn before_update(&mut self, _t: u64, w: &ParamVector, optimizer: &Optimizer, g: &ParamVector, _stale: &ParamVector) {
        let cfg = optimizer.config().with_algorithm(Algorithm::Sgdm);
        let mut w_hat = w.clone();
        let mut state = OptimizerState::new(Algorithm::Sgdm, w.len(), 1);
        state.velocity.copy_from(&optimizer.state().velocity);
        let result = sgdm_step(&mut w_hat, &mut state, g, &cfg)
            .and_then(|_| self.problem.energy(&w_hat, &state.velocity, cfg.eta));
        match result {
            Ok(e) => self.counterfactual = Some(e),
            Err(e) => self.error = Some(e),
        }
    }

    fn after_update(&mut self, _t: u64, w: &ParamVector, optimizer: &Optimizer) {
        let Some(reference) = self.counterfactual.take() else {
            return;
        };
        let actual = match self.problem.energy(w, &optimizer.state().velocity, optimizer.config().eta) {
            Ok(e) => e,
            Err(e) => {
                self.error = Some(e);
                return;
            }
        };
        for k in 0..actual.components.len() {
            Self::accumulate(
                &mut self.log_sum[k],
                &mut self.counts[k],
                &mut self.excluded[k],
                actual.components[k],
                reference.components[k],
            );
        }
        Self::accumulate(
            &mut self.total_log_sum,
            &mut self.total_count,
            &mut self.total_excluded,
            actual.total,
            reference.total,
        );
        self.steps += 1;
    }
}

/// Runs `optimizer` on an axis-aligned problem and measures, at every
/// state along the trajectory, the actual next-state energy against the
/// energy an SGDM step would have produced from the same state with the
/// same gradient sample.
pub fn relative_energy_decay(
    problem: &QuadraticProblem,
    optimizer: Optimizer,
    delay: DelayConfig,
    spec: &RunSpec,
    rng: Rng,
) -> Result<(EnergyDecay, RunResult)> {
    if problem.rotation().is_some() {
        return Err(Error::contract("relative energy decay needs an axis-aligned problem"));
    }
    if optimizer.config().algorithm.per_worker_velocity() {
        return Err(Error::contract("relative energy decay needs a single shared velocity"));
    }
    let n = problem.dim();
    let mut observer = DecayObserver {
        problem,
        counterfactual: None,
        log_sum: vec![0.0; n],
        counts: vec![0; n],
        excluded: vec![0; n],
        total_log_sum: 0.0,
        total_count: 0,
        total_excluded: 0,
        steps: 0,
        error: None,
    };
    let mut oracle = NqmOracle::new(problem, rng);
    let run = run_async(&mut oracle, optimizer, problem.w0(), delay, spec, Some(&mut observer))?;
    if let Some(e) = observer.error {
        return Err(e);
    }
    if observer.steps < 1 {
        return Err(Error::contract("trajectory too short for an energy ratio"));
    }
    let geo = |sum: f64, count: u64| if count == 0 { f64::NAN } else { (sum / count as f64).exp() };
    let decay = EnergyDecay {
        eigenvalues: problem.eigenvalues().to_vec(),
        geomean_ratio: observer
            .log_sum
            .iter()
            .zip(&observer.counts)
            .map(|(&s, &c)| geo(s, c))
            .collect(),
        excluded: observer.excluded,
        total_geomean_ratio: geo(observer.total_log_sum, observer.total_count),
        total_excluded: observer.total_excluded,
        steps: observer.steps,
    };
    Ok((decay, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerConfig;
    use crate::param::GroupSpec;

    #[test]
    fn inverse_spectrum() {
        assert_eq!(make_inverse_spectrum(1).unwrap(), vec![1.0]);
        let s = make_inverse_spectrum(3).unwrap();
        assert_eq!(s, vec![1.0, 0.5, 1.0 / 3.0]);
        let big = make_inverse_spectrum(10_000).unwrap();
        assert_eq!(big[9_999], 1e-4);
        assert!(make_inverse_spectrum(0).is_err());
    }

    #[test]
    fn loguniform_spectrum() {
        let s = make_loguniform_spectrum(32, 1e-4, 1.0).unwrap();
        assert_eq!((s[0], s[31]), (1e-4, 1.0));
        assert!(s.windows(2).all(|p| p[0] < p[1]));
        assert_eq!(make_loguniform_spectrum(2, 0.1, 10.0).unwrap(), vec![0.1, 10.0]);
        let three = make_loguniform_spectrum(3, 0.01, 1.0).unwrap();
        assert!((three[1] - 0.1).abs() < 1e-15);
        assert!(make_loguniform_spectrum(3, 1.0, 0.1).is_err());
        assert!(make_loguniform_spectrum(3, 0.0, 0.1).is_err());
    }

    #[test]
    fn rejects_nonpositive_eigenvalues() {
        assert!(QuadraticProblem::from_spectrum(vec![1.0, 0.0], 0.0, 0.01).is_err());
        assert!(QuadraticProblem::from_spectrum(vec![1.0], -1.0, 0.01).is_err());
    }

    #[test]
    fn noiseless_gradient_is_hw() {
        let p = QuadraticProblem::from_spectrum(vec![1.0, 0.5], 0.0, 0.01).unwrap();
        let mut g = ParamVector::zeros(2);
        p.gradient(&ParamVector::from_vec(vec![2.0, 2.0]), &mut Rng::new(0), &mut g).unwrap();
        assert_eq!(g.as_slice(), &[2.0, 1.0]);
    }

    #[test]
    fn loss_examples() {
        let p = QuadraticProblem::from_spectrum(make_inverse_spectrum(3).unwrap(), 0.0, 0.01).unwrap();
        assert_eq!(p.loss(&ParamVector::zeros(3)).unwrap(), 0.0);
        assert!((p.loss(p.w0()).unwrap() - 11.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn noise_covariance_matches_hessian() {
        let lambdas = vec![1.0, 0.25, 0.04];
        let p = QuadraticProblem::from_spectrum(lambdas.clone(), 1.0, 0.01).unwrap();
        let w = ParamVector::zeros(3);
        let mut rng = Rng::new(11);
        let mut g = ParamVector::zeros(3);
        let n = 1_000_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut cross = 0.0;
        for _ in 0..n {
            p.gradient(&w, &mut rng, &mut g).unwrap();
            for k in 0..3 {
                sum[k] += g[k];
                sq[k] += g[k] * g[k];
            }
            cross += g[0] * g[1];
        }
        for k in 0..3 {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            assert!((var / lambdas[k] - 1.0).abs() < 0.01, "component {k}: {var}");
        }
        assert!((cross / n as f64).abs() < 0.01);
    }

    #[test]
    fn rotation_is_orthogonal_and_conjugates() {
        let n = 16;
        let rot = Rotation::random(n, &mut Rng::new(5));
        assert!(rot.orthogonality_error() < 1e-10);
        let lambdas = make_loguniform_spectrum(n, 1e-2, 1.0).unwrap();
        let base = QuadraticProblem::from_spectrum(lambdas.clone(), 0.0, 1e-5).unwrap();
        let rotated = base.rotated(rot.clone()).unwrap();

        let mut rng = Rng::new(1);
        let wprime = rng.gaussian_sample(n);
        // loss at Qᵀw' equals unrotated loss at w'
        let mut w = ParamVector::zeros(n);
        rot.apply_transpose(&wprime, &mut w);
        let l1 = rotated.loss(&w).unwrap();
        let l2 = base.loss(&wprime).unwrap();
        assert!((l1 - l2).abs() <= 1e-12 * l2);

        // gradient equals Qᵀ·H·Q·w
        let mut g = ParamVector::zeros(n);
        rotated.gradient(&w, &mut rng, &mut g).unwrap();
        let mut u = vec![0.0; n];
        rot.apply(&w, &mut u);
        let hu: Vec<f64> = u.iter().zip(&lambdas).map(|(a, l)| a * l).collect();
        let mut expect = vec![0.0; n];
        rot.apply_transpose(&hu, &mut expect);
        for k in 0..n {
            assert!((g[k] - expect[k]).abs() < 1e-12);
        }
        // same seed, same matrix
        assert_eq!(Rotation::random(n, &mut Rng::new(5)), rot);
    }

    #[test]
    fn energy_examples() {
        let p = QuadraticProblem::from_spectrum(vec![1.0], 0.0, 0.01).unwrap();
        let w = ParamVector::from_vec(vec![1.0]);
        let e = p.energy(&w, &ParamVector::zeros(1), 0.1).unwrap();
        assert_eq!(e.total, p.loss(&w).unwrap());
        // L = 0.5, η = 0.1, ‖v‖² = 4
        let e = p.energy(&w, &ParamVector::from_vec(vec![2.0]), 0.1).unwrap();
        assert!((e.total - 0.7).abs() < 1e-15);
        assert!(p.energy(&w, &ParamVector::zeros(1), 0.0).is_err());
    }

    #[test]
    fn energy_components_sum_to_total() {
        let lambdas = make_inverse_spectrum(50).unwrap();
        let p = QuadraticProblem::from_spectrum(lambdas, 0.0, 0.01).unwrap();
        let mut rng = Rng::new(3);
        let w = rng.gaussian_sample(50);
        let v = rng.gaussian_sample(50);
        let e = p.energy(&w, &v, 0.37).unwrap();
        let sum: f64 = e.components.iter().sum();
        assert!((sum - e.total).abs() <= 1e-10 * e.total);
        assert!(e.total >= p.loss(&w).unwrap());
    }

    fn decay_for(rho: f64, lambdas: Vec<f64>, eta: f64, m: f64, delay: u64, sigma: f64, steps: u64) -> EnergyDecay {
        let n = lambdas.len();
        let p = QuadraticProblem::from_spectrum(lambdas, sigma, 1e-12).unwrap();
        let cfg = OptimizerConfig::new(Algorithm::Ab, eta, m).with_rho(rho);
        let opt = Optimizer::new(cfg, GroupSpec::global(n), n, delay as usize + 1).unwrap();
        let spec = RunSpec::new(steps);
        relative_energy_decay(&p, opt, DelayConfig::new(delay), &spec, Rng::new(17)).unwrap().0
    }

    #[test]
    fn no_braking_means_unit_ratio() {
        let d = decay_for(0.0, make_inverse_spectrum(20).unwrap(), 0.02, 0.9, 2, 1.0, 300);
        assert!(d.geomean_ratio.iter().all(|&r| r == 1.0));
        assert_eq!(d.total_geomean_ratio, 1.0);
        assert_eq!(d.steps, 300);
    }

    #[test]
    fn overdamped_component_is_slowed() {
        // Small step, no momentum: g and v stay aligned, α < 1, slower decay.
        let d = decay_for(0.5, vec![1.0], 0.05, 0.0, 0, 0.0, 50);
        assert!(d.geomean_ratio[0] > 1.0, "{:?}", d.geomean_ratio);
    }

    #[test]
    fn decay_requires_axis_aligned_problem() {
        let p = QuadraticProblem::from_spectrum(vec![1.0, 0.5], 0.0, 0.01)
            .unwrap()
            .rotated(Rotation::random(2, &mut Rng::new(0)))
            .unwrap();
        let opt = Optimizer::new(OptimizerConfig::new(Algorithm::Ab, 0.1, 0.9), GroupSpec::global(2), 2, 1).unwrap();
        assert!(relative_energy_decay(&p, opt, DelayConfig::new(0), &RunSpec::new(10), Rng::new(0)).is_err());
    }
}
