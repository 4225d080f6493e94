//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use delaylab_core::harness::{run_async, DelayConfig, GradientOracle, RunResult, RunSpec, RunStatus, StepObserver};
use delaylab_core::metrics::median;
use delaylab_core::mlp::{self, Batch, MlpSpec, SyntheticDataset, TrainConfig};
use delaylab_core::nqm::{
    make_inverse_spectrum, make_loguniform_spectrum, relative_energy_decay, NqmOracle, QuadraticProblem, Rotation,
};
use delaylab_core::optim::{compute_alpha, UpdateContext};
use delaylab_core::sweep::{log_space, run_sweep, CellOutcome, SweepGrid, SweepResult, SweepSetup};
use delaylab_core::{Algorithm, GroupMode, GroupSpec, Optimizer, OptimizerConfig, ParamVector, Result, Rng};

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_nqm(
    problem: &QuadraticProblem,
    cfg: OptimizerConfig,
    groups: GroupSpec,
    delay: u64,
    spec: &RunSpec,
    seed: u64,
) -> RunResult {
    let n = problem.dim();
    let delay = DelayConfig::new(delay);
    let opt = Optimizer::new(cfg, groups, n, delay.num_workers()).expect("valid optimizer");
    let mut oracle = NqmOracle::new(problem, Rng::new(seed));
    run_async(&mut oracle, opt, problem.w0(), delay, spec, None).expect("run completes")
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn reduction_identities() -> Outcome {
    let problem = QuadraticProblem::from_spectrum(make_inverse_spectrum(100).unwrap(), 1.0, 1e-12).unwrap();
    let spec = RunSpec::new(1000).with_losses();
    let (eta, m) = (0.02, 0.8);
    let layouts = [
        GroupSpec::global(100),
        GroupSpec::per_element(100),
        GroupSpec::from_ranges(GroupMode::PerTensor, 100, vec![0..10, 10..45, 45..100]).unwrap(),
    ];
    let mut checked = 0;
    for delay in [4u64, 0] {
        let reference = run_nqm(&problem, OptimizerConfig::sgdm(eta, m), GroupSpec::global(100), delay, &spec, 7);
        ensure(reference.steps_run == 1000, || format!("reference run stopped early: {:?}", reference.status))?;
        let mut candidates: Vec<(String, OptimizerConfig, GroupSpec)> = Vec::new();
        for groups in &layouts {
            for alg in [Algorithm::Ab, Algorithm::AbVelOnly, Algorithm::AbWeightOnly] {
                let cfg = OptimizerConfig::new(alg, eta, m).with_rho(0.0);
                candidates.push((format!("{alg}/{:?}", groups.mode()), cfg, groups.clone()));
            }
            for s in [1, 2, 16] {
                let cfg = OptimizerConfig::new(Algorithm::AbMicroStep, eta, m).with_rho(0.0).with_micro_steps(s);
                candidates.push((format!("ab_microstep S={s}/{:?}", groups.mode()), cfg, groups.clone()));
            }
        }
        candidates.push((
            "dc lambda0=0".into(),
            OptimizerConfig::new(Algorithm::Dc, eta, m).with_dc(0.0, 0.95),
            GroupSpec::global(100),
        ));
        if delay == 0 {
            candidates.push(("sa".into(), OptimizerConfig::new(Algorithm::Sa, eta, m), GroupSpec::global(100)));
        }
        for (name, cfg, groups) in candidates {
            let r = run_nqm(&problem, cfg, groups, delay, &spec, 7);
            ensure(same_bits(&r.weights, &reference.weights), || format!("{name} (D={delay}): weights differ from SGDM"))?;
            ensure(same_bits(&r.losses, &reference.losses), || format!("{name} (D={delay}): losses differ from SGDM"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} configurations bit-identical to SGDM over 1000 steps"))
}

fn closed_form_convergence() -> Outcome {
    let target = 0.01;
    let mut checked = 0;
    for &lambda in &[1.0, 0.5, 0.1, 2.0, 0.03] {
        for &w0 in &[1.0, 3.0] {
            for &h in &[0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 1.2, 1.5, 1.8, 1.95, 2.1, 2.5, 3.0, 4.0] {
                let eta = h / lambda;
                let problem = QuadraticProblem::new(vec![lambda], 0.0, ParamVector::filled(1, w0), target).unwrap();
                let spec = RunSpec::new(100_000).with_target(target);
                let r = run_nqm(&problem, OptimizerConfig::sgdm(eta, 0.0), GroupSpec::global(1), 0, &spec, 0);
                let initial = 0.5 * lambda * w0 * w0;
                if h > 2.0 {
                    ensure(matches!(r.status, RunStatus::Diverged { .. }), || {
                        format!("λ={lambda} η={eta}: expected divergence, got {:?}", r.status)
                    })?;
                } else {
                    let bound = (target / initial).ln() / (1.0 - eta * lambda).powi(2).ln();
                    if (bound - bound.round()).abs() < 1e-9 {
                        continue;
                    }
                    let expected = bound.ceil().max(0.0) as u64;
                    ensure(r.status == RunStatus::Converged { step: expected }, || {
                        format!("λ={lambda} η={eta} w0={w0}: expected T={expected}, got {:?}", r.status)
                    })?;
                }
                checked += 1;
            }
        }
    }
    let example = QuadraticProblem::from_spectrum(vec![1.0], 0.0, 0.01).unwrap();
    let r = run_nqm(&example, OptimizerConfig::sgdm(0.5, 0.0), GroupSpec::global(1), 0, &RunSpec::new(100).with_target(0.01), 0);
    ensure(r.status == RunStatus::Converged { step: 3 }, || format!("λ=1 η=0.5: {:?}", r.status))?;
    Ok(format!("{checked} cells match the geometric-decay bound; ηλ>2 diverges"))
}

struct Recording<'a> {
    inner: NqmOracle<'a>,
    points: Vec<ParamVector>,
}

impl GradientOracle for Recording<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn gradient(&mut self, w: &ParamVector, worker: usize, step: u64, out: &mut ParamVector) -> Result<()> {
        self.points.push(w.clone());
        self.inner.gradient(w, worker, step, out)
    }

    fn loss(&self, w: &ParamVector) -> Result<f64> {
        self.inner.loss(w)
    }
}

/// Master weights (or DANA's look-ahead) after every step; index 0 = w₀.
struct Snapshots(Vec<ParamVector>);

impl StepObserver for Snapshots {
    fn after_update(&mut self, _t: u64, w: &ParamVector, optimizer: &Optimizer) {
        self.0.push(optimizer.lookahead().unwrap_or(w).clone());
    }
}

const ALL_ALGORITHMS: [Algorithm; 9] = [
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

fn harness_equivalence() -> Outcome {
    let n = 50;
    let problem = QuadraticProblem::from_spectrum(make_inverse_spectrum(n).unwrap(), 1.0, 1e-12).unwrap();
    let steps = 300;
    for alg in ALL_ALGORITHMS {
        let cfg = OptimizerConfig::new(alg, 0.05, 0.9).with_micro_steps(4);
        // Direct synchronous loop.
        let mut opt = Optimizer::new(cfg, GroupSpec::global(n), n, 1).unwrap();
        let mut oracle = NqmOracle::new(&problem, Rng::new(3));
        let mut w = problem.w0().clone();
        let mut g = ParamVector::zeros(n);
        let mut losses = vec![problem.loss(&w).unwrap()];
        for t in 1..=steps {
            let point = opt.lookahead().cloned().unwrap_or_else(|| w.clone());
            oracle.gradient(&point, 0, t, &mut g).unwrap();
            opt.update(&mut w, &g, UpdateContext { worker: 0, stale_weights: &point }, None).unwrap();
            losses.push(problem.loss(&w).unwrap());
        }
        let r = run_nqm(&problem, cfg, GroupSpec::global(n), 0, &RunSpec::new(steps).with_losses(), 3);
        ensure(same_bits(&r.weights, &w), || format!("{alg}: D=0 harness weights differ from the direct loop"))?;
        ensure(same_bits(&r.losses, &losses), || format!("{alg}: D=0 harness losses differ from the direct loop"))?;
    }

    let delay = 3u64;
    for alg in ALL_ALGORITHMS {
        let cfg = OptimizerConfig::new(alg, 0.02, 0.5).with_micro_steps(2);
        let d = DelayConfig::new(delay);
        let opt = Optimizer::new(cfg, GroupSpec::global(n), n, d.num_workers()).unwrap();
        let mut rec = Recording {
            inner: NqmOracle::new(&problem, Rng::new(5)),
            points: Vec::new(),
        };
        let mut snaps = Snapshots(vec![problem.w0().clone()]);
        run_async(&mut rec, opt, problem.w0(), d, &RunSpec::new(steps), Some(&mut snaps)).unwrap();
        for (i, point) in rec.points.iter().enumerate() {
            let t = i as u64 + 1;
            let expected = &snaps.0[(t - 1).saturating_sub(delay) as usize];
            ensure(point == expected, || format!("{alg}: gradient at step {t} did not use the snapshot from {delay} steps earlier"))?;
        }
        ensure(rec.points.len() == steps as usize, || format!("{alg}: wrong number of gradient calls"))?;
    }
    Ok(format!("{} algorithms: D=0 equals direct loop; D={delay} gradients read the right snapshot", ALL_ALGORITHMS.len()))
}

struct RegionSweeps {
    sgdm: SweepResult,
    ab: SweepResult,
    problem: QuadraticProblem,
}

const REGION_DELAY: u64 = 3;

fn region_sweeps() -> &'static RegionSweeps {
    static CELL: OnceLock<RegionSweeps> = OnceLock::new();
    CELL.get_or_init(|| {
        let problem = QuadraticProblem::from_spectrum(make_inverse_spectrum(10_000).unwrap(), 0.0, 0.01).unwrap();
        let grid = SweepGrid {
            eta_values: log_space(0.1, 1.0, 12).unwrap(),
            momentum_values: vec![0.0, 0.3, 0.6, 0.8, 0.9, 0.95],
            max_steps: 50_000,
            target: 0.01,
            trials_per_cell: 1,
        };
        let sweep = |cfg: OptimizerConfig| {
            let setup = SweepSetup {
                problem: &problem,
                base: cfg,
                grouping: GroupMode::Global,
                delay: REGION_DELAY,
                seed: 0,
                parallelism: None,
            };
            run_sweep(&setup, &grid).unwrap()
        };
        let sgdm = sweep(OptimizerConfig::sgdm(0.1, 0.0));
        let ab = sweep(OptimizerConfig::new(Algorithm::Ab, 0.1, 0.0).with_rho(0.5));
        RegionSweeps { sgdm, ab, problem }
    })
}

/// Cells where SGDM fails and braking converges, as (eta, momentum).
fn rescued_cells(s: &RegionSweeps) -> Vec<(f64, f64, u64)> {
    s.sgdm
        .cells
        .iter()
        .zip(&s.ab.cells)
        .filter_map(|(a, b)| match (a.median, b.median) {
            (CellOutcome::Timeout | CellOutcome::Diverged, CellOutcome::Converged(t)) => Some((b.eta, b.momentum, t)),
            _ => None,
        })
        .collect()
}

fn convergence_region() -> Outcome {
    let s = region_sweeps();
    let rescued = rescued_cells(s);
    ensure(!rescued.is_empty(), || "no cell where SGDM fails and braking converges".into())?;
    let (ts_sgdm, ts_ab) = (s.sgdm.t_star, s.ab.t_star);
    let (Some(t_sgdm), Some(t_ab)) = (ts_sgdm, ts_ab) else {
        return Err(format!("T* missing: sgdm {ts_sgdm:?}, ab {ts_ab:?}"));
    };
    ensure(t_ab <= t_sgdm, || format!("braking T* {t_ab} exceeds SGDM T* {t_sgdm}"))?;
    let count = |r: &SweepResult| r.cells.iter().filter(|c| c.median.steps().is_some()).count();
    Ok(format!(
        "{} rescued cells (first: η={:.4}, m={}, T={}); converged cells sgdm {} / ab {}; T* sgdm {t_sgdm:.0}, ab {t_ab:.0}",
        rescued.len(),
        rescued[0].0,
        rescued[0].1,
        rescued[0].2,
        count(&s.sgdm),
        count(&s.ab)
    ))
}

fn energy_dissipation() -> Outcome {
    let s = region_sweeps();
    let rescued = rescued_cells(s);
    let &(eta, m, _) = rescued.first().ok_or("no SGDM-unstable, braking-stable cell to measure")?;
    let n = s.problem.dim();
    let cfg = OptimizerConfig::new(Algorithm::Ab, eta, m).with_rho(0.5);
    let d = DelayConfig::new(REGION_DELAY);
    let opt = Optimizer::new(cfg, GroupSpec::global(n), n, d.num_workers()).unwrap();
    let spec = RunSpec::new(2000).with_target(0.01);
    let (decay, _) = relative_energy_decay(&s.problem, opt, d, &spec, Rng::new(0)).unwrap();
    let top: Vec<f64> = decay.geomean_ratio[..3].to_vec();
    ensure(top.iter().all(|&r| r < 1.0), || format!("top-3 geometric-mean ratios {top:?} at η={eta}, m={m}"))?;
    Ok(format!("η={eta:.4}, m={m}, D={REGION_DELAY}: top-3 ratios {:.3}, {:.3}, {:.3} over {} steps", top[0], top[1], top[2], decay.steps))
}

fn microstep_stability() -> Outcome {
    let problem = QuadraticProblem::from_spectrum(make_inverse_spectrum(10_000).unwrap(), 0.0, 0.01).unwrap();
    let n = problem.dim();
    let spec = RunSpec::new(10_000).with_target(0.01);
    let m = 0.5;
    let mut tried = Vec::new();
    for eta in [1.5, 1.8, 2.0, 2.2, 2.5, 3.0] {
        let plain = run_nqm(&problem, OptimizerConfig::new(Algorithm::Ab, eta, m).with_rho(0.5), GroupSpec::global(n), 0, &spec, 0);
        if !matches!(plain.status, RunStatus::Diverged { .. }) {
            tried.push(format!("η={eta}: plain {}", plain.status.name()));
            continue;
        }
        let micro = run_nqm(
            &problem,
            OptimizerConfig::new(Algorithm::AbMicroStep, eta, m).with_rho(0.5).with_micro_steps(16),
            GroupSpec::global(n),
            0,
            &spec,
            0,
        );
        if let RunStatus::Converged { step } = micro.status {
            return Ok(format!("η={eta}, m={m}: plain braking diverges, S=16 converges in {step} steps"));
        }
        tried.push(format!("η={eta}: plain diverged, S=16 {}", micro.status.name()));
    }
    Err(format!("no witness: {}", tried.join("; ")))
}

fn grouping_on_rotations() -> Outcome {
    let spectrum = make_loguniform_spectrum(32, 1e-4, 1.0).unwrap();
    let problem = QuadraticProblem::from_spectrum(spectrum, 0.0, 1e-5).unwrap();
    let spec = RunSpec::new(200_000).with_target(1e-5);
    let ab = |eta, m| OptimizerConfig::new(Algorithm::Ab, eta, m).with_rho(0.5);
    let mut witness = None;
    'search: for eta in [0.1, 0.3, 0.5] {
        for m in [0.0, 0.5, 0.9] {
            let elem = run_nqm(&problem, ab(eta, m), GroupSpec::per_element(32), 1, &spec, 0).status;
            let glob = run_nqm(&problem, ab(eta, m), GroupSpec::global(32), 1, &spec, 0).status;
            if let RunStatus::Converged { step } = elem {
                let beats = match glob {
                    RunStatus::Converged { step: g } => step < g,
                    _ => true,
                };
                if beats {
                    witness = Some(format!("η={eta}, m={m}: element-wise {step} steps vs global {}", glob.name()));
                    if !matches!(glob, RunStatus::Converged { .. }) {
                        break 'search;
                    }
                }
            }
        }
    }
    let witness = witness.ok_or("element-wise braking never beat global braking on the aligned problem")?;

    let rotated = problem.rotated(Rotation::random(32, &mut Rng::new(99))).unwrap();
    let trace = RunSpec::new(3000).with_losses();
    let compare = |groups: GroupSpec| {
        let a = run_nqm(&problem, ab(0.3, 0.5), groups.clone(), 1, &trace, 0).losses;
        let b = run_nqm(&rotated, ab(0.3, 0.5), groups, 1, &trace, 0).losses;
        a.iter().zip(&b).map(|(x, y)| (x - y).abs() / x.abs().max(f64::MIN_POSITIVE)).fold(0.0, f64::max)
    };
    let global_dev = compare(GroupSpec::global(32));
    let elem_dev = compare(GroupSpec::per_element(32));
    ensure(global_dev <= 1e-9, || format!("global braking changed under rotation (max rel. deviation {global_dev:e})"))?;
    ensure(elem_dev > 1e-6, || format!("element-wise braking unexpectedly rotation invariant ({elem_dev:e})"))?;
    Ok(format!("{witness}; rotation deviation global {global_dev:.1e}, element-wise {elem_dev:.1e}"))
}

fn mlp_gradient_check() -> Outcome {
    let spec = MlpSpec::new(vec![8, 32, 32, 5]).unwrap();
    let data = SyntheticDataset::blobs(64, 8, 5, 1.5, 2).unwrap();
    let mut rng = Rng::new(21);
    let mut params = mlp::he_init(&spec, &mut rng);
    for x in params.iter_mut() {
        *x += 0.05 * rng.standard_normal();
    }
    let batch = Batch {
        inputs: &data.inputs()[..32 * 8],
        labels: &data.labels()[..32],
    };
    let mut grad = ParamVector::zeros(spec.num_params());
    mlp::forward_backward(&spec, &params, batch, &mut grad).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.below(spec.num_params());
        let mut p = params.clone();
        p[k] = params[k] + h;
        let up = mlp::evaluate(&spec, &p, batch).unwrap().0;
        p[k] = params[k] - h;
        let down = mlp::evaluate(&spec, &p, batch).unwrap().0;
        let fd = (up - down) / (2.0 * h);
        let scale = fd.abs().max(grad[k].abs());
        let rel = if scale == 0.0 { 0.0 } else { (fd - grad[k]).abs() / scale.max(1e-6) };
        worst = worst.max(rel);
        ensure(rel < 1e-5, || format!("coordinate {k}: analytic {} vs finite difference {fd} (rel {rel:e})", grad[k]))?;
    }
    Ok(format!("100 coordinates, worst relative error {worst:.1e}"))
}

fn delayed_mlp_tolerance() -> Outcome {
    let spec = MlpSpec::new(vec![8, 32, 32, 5]).unwrap();
    let data = SyntheticDataset::blobs(2000, 8, 5, 1.5, 1).unwrap();
    let run = |cfg: OptimizerConfig| -> (f64, f64) {
        let mut finals = Vec::new();
        let mut early = Vec::new();
        for seed in 0..3 {
            let mut tc = TrainConfig::new(cfg, 2000, seed);
            tc.delay = 8;
            tc.trace_every = 5;
            tc.trace_groups = false;
            let r = mlp::train(&spec, &data, &tc).unwrap();
            finals.push(if r.final_loss.is_nan() { f64::INFINITY } else { r.final_loss });
            early.push(r.trace.iter().filter(|row| row.step <= 200).map(|row| row.vel_norm_total).fold(0.0, f64::max));
        }
        (median(&finals).unwrap(), median(&early).unwrap())
    };
    let (eta, m) = (0.01, 0.95);
    let (sgdm_loss, sgdm_vel) = run(OptimizerConfig::sgdm(eta, m));
    let mut parts = vec![format!("sgdm loss {sgdm_loss:.4} max|v| {sgdm_vel:.1}")];
    for rho in [1.0, 2.0] {
        let (loss, vel) = run(OptimizerConfig::new(Algorithm::Ab, eta, m).with_rho(rho));
        ensure(loss <= sgdm_loss, || format!("ρ={rho}: median final loss {loss} > SGDM {sgdm_loss}"))?;
        ensure(vel < sgdm_vel, || format!("ρ={rho}: early max ‖v‖ {vel} not below SGDM {sgdm_vel}"))?;
        parts.push(format!("ρ={rho} loss {loss:.4} max|v| {vel:.1}"));
    }
    Ok(format!("m={m}, D=8, η={eta}: {}", parts.join(", ")))
}

fn alpha_range_fuzz() -> Outcome {
    let mut rng = Rng::new(2024);
    let draw = |rng: &mut Rng| -> f64 {
        match rng.below(6) {
            0 => 0.0,
            1 => rng.standard_normal(),
            2 => rng.standard_normal() * 1e300,
            3 => rng.standard_normal() * 1e-300,
            4 => rng.standard_normal() * 10f64.powf(rng.uniform() * 40.0 - 20.0),
            _ => f64::MIN_POSITIVE * rng.standard_normal(),
        }
    };
    for i in 0..100_000 {
        let len = 1 + rng.below(8);
        let zero_g = rng.below(10) == 0;
        let zero_v = rng.below(10) == 0;
        let g: Vec<f64> = (0..len).map(|_| if zero_g { 0.0 } else { draw(&mut rng) }).collect();
        let v: Vec<f64> = (0..len).map(|_| if zero_v { 0.0 } else { draw(&mut rng) }).collect();
        let rho = rng.uniform() * 3.0;
        let eps = 10f64.powf(rng.uniform() * 24.0 - 20.0);
        let a = compute_alpha(&ParamVector::from_vec(g.clone()), &ParamVector::from_vec(v.clone()), 0..len, rho, eps).unwrap();
        ensure(a.is_finite() && a >= 1.0 - rho && a <= 1.0 + rho, || {
            format!("draw {i}: α={a} outside [1−ρ, 1+ρ] for ρ={rho}, ε={eps}, g={g:?}, v={v:?}")
        })?;
    }
    Ok("100000 draws inside [1−ρ, 1+ρ], all finite".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("1 reduction identities", reduction_identities),
        ("2 closed-form convergence", closed_form_convergence),
        ("3 harness equivalence", harness_equivalence),
        ("4 braking widens the convergence region", convergence_region),
        ("5 braking dissipates energy in top components", energy_dissipation),
        ("6 micro-stepping tolerates larger steps", microstep_stability),
        ("7 grouping on rotated quadratics", grouping_on_rotations),
        ("8 MLP gradient check", mlp_gradient_check),
        ("9 delayed MLP tolerance", delayed_mlp_tolerance),
        ("10 alpha range fuzz", alpha_range_fuzz),
    ];
    let mut failures = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{name}] ({secs:.1}s) {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL [{name}] ({secs:.1}s) {detail}");
            }
        }
    }
    if failures == 0 {
        println!("acceptance: all {} criteria passed", criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of {} criteria failed", criteria.len());
        ExitCode::FAILURE
    }
}
