use std::fs::File;
use std::io::BufReader;

use delaylab_core::harness::{run_async, DelayConfig, RunResult, RunSpec, TracePolicy};
use delaylab_core::metrics::TraceRow;
use delaylab_core::mlp::{self, MlpSpec, SyntheticDataset, TrainConfig};
use delaylab_core::nqm::{
    make_inverse_spectrum, make_loguniform_spectrum, relative_energy_decay, NqmOracle, QuadraticProblem, Rotation,
};
use delaylab_core::sweep::{run_sweep, SweepSetup};
use delaylab_core::{Algorithm, GroupSpec, Optimizer, OptimizerConfig, ParamVector, Rng};
use serde_json::json;

use crate::config::{Command, ProblemKind, Resolved, SpectrumKind};
use crate::error::CliError;
use crate::output::{fmt_f64, fmt_opt, out_path, write_summary, Csv};

const ROTATION_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 3;

pub fn execute(r: &Resolved) -> Result<(), CliError> {
    match r.command {
        Command::Run | Command::Train => cmd_run(r),
        Command::Sweep => cmd_sweep(r),
        Command::Energy => cmd_energy(r),
        Command::Ablate => cmd_ablate(r),
    }
}

fn build_nqm(r: &Resolved) -> Result<QuadraticProblem, CliError> {
    let p = r.problem();
    let dim = p.dim.expect("resolved");
    let eigenvalues = match p.spectrum.expect("resolved") {
        SpectrumKind::Inverse => make_inverse_spectrum(dim)?,
        SpectrumKind::Loguniform => make_loguniform_spectrum(dim, p.lo.expect("resolved"), p.hi.expect("resolved"))?,
        SpectrumKind::Explicit => p.eigenvalues.clone().expect("resolved"),
    };
    let w0 = ParamVector::filled(dim, p.w0.expect("resolved"));
    let target = r.run().target_loss.unwrap_or(f64::MIN_POSITIVE);
    let problem = QuadraticProblem::new(eigenvalues, p.noise_sigma.expect("resolved"), w0, target)?;
    if p.rotate.expect("resolved") {
        let rotation = Rotation::random(dim, &mut Rng::substream(r.seed, ROTATION_STREAM));
        Ok(problem.rotated(rotation)?)
    } else {
        Ok(problem)
    }
}

fn build_mlp(r: &Resolved) -> Result<(MlpSpec, SyntheticDataset), CliError> {
    let p = r.problem();
    let spec = MlpSpec::new(p.layer_sizes.clone().expect("resolved"))?;
    let data = match &p.data_csv {
        Some(path) => {
            let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            SyntheticDataset::read_csv(BufReader::new(file), Some(spec.num_classes()))?
        }
        None => SyntheticDataset::blobs(
            p.samples.expect("resolved"),
            spec.input_dim(),
            spec.num_classes(),
            p.separation.expect("resolved"),
            r.seed,
        )?,
    };
    Ok((spec, data))
}

/// Single run of `cfg` on the configured problem.
fn single_run(r: &Resolved, cfg: &OptimizerConfig) -> Result<(RunResult, usize), CliError> {
    let run = r.run();
    match r.problem().kind.expect("resolved") {
        ProblemKind::Nqm => {
            let problem = build_nqm(r)?;
            let n = problem.dim();
            let groups = GroupSpec::for_flat(r.grouping, n)?;
            let num_groups = groups.num_groups();
            let delay = DelayConfig::new(r.delay());
            let optimizer = Optimizer::new(*cfg, groups, n, delay.num_workers())?;
            let mut spec = RunSpec::new(r.max_steps())
                .with_trace(TracePolicy::Every(run.trace_every.expect("resolved")))
                .with_schedule(run.schedule.clone().unwrap_or_default());
            spec.target_loss = run.target_loss;
            spec.trace_groups = run.trace_groups.expect("resolved");
            spec.divergence_factor = run.divergence_factor.expect("resolved");
            let mut oracle = NqmOracle::new(&problem, Rng::substream(r.seed, NOISE_STREAM));
            let result = run_async(&mut oracle, optimizer, problem.w0(), delay, &spec, None)?;
            Ok((result, num_groups))
        }
        ProblemKind::Mlp => {
            let (spec, data) = build_mlp(r)?;
            let num_groups = mlp::build_groups(&spec, r.grouping)?.num_groups();
            let mut tc = TrainConfig::new(*cfg, r.max_steps(), r.seed);
            tc.grouping = r.grouping;
            tc.delay = r.delay();
            tc.batch_size = r.problem().batch_size.expect("resolved");
            tc.schedule = run.schedule.clone().unwrap_or_default();
            tc.trace_every = run.trace_every.expect("resolved");
            tc.trace_groups = run.trace_groups.expect("resolved");
            tc.target_loss = run.target_loss;
            tc.divergence_factor = run.divergence_factor.expect("resolved");
            Ok((mlp::train(&spec, &data, &tc)?, num_groups))
        }
    }
}

fn trace_columns(num_groups: usize, per_group: bool) -> Vec<String> {
    let mut cols: Vec<String> = [
        "step",
        "lr",
        "loss",
        "energy",
        "accuracy",
        "vel_norm",
        "update_alignment",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    if per_group {
        for name in ["alpha", "grad_norm", "vel_norm", "gvr"] {
            cols.extend((0..num_groups).map(|g| format!("{name}_{g}")));
        }
    }
    cols
}

fn trace_cells(row: &TraceRow, num_groups: usize, per_group: bool) -> Vec<String> {
    let mut cells = vec![
        row.step.to_string(),
        fmt_f64(row.lr),
        fmt_f64(row.loss),
        fmt_opt(row.energy),
        fmt_opt(row.accuracy),
        fmt_f64(row.vel_norm_total),
        fmt_opt(row.update_alignment),
    ];
    if per_group {
        for series in [&row.alpha, &row.grad_norm, &row.vel_norm, &row.gvr] {
            cells.extend((0..num_groups).map(|g| fmt_opt(series.get(g).copied())));
        }
    }
    cells
}

fn run_summary(result: &RunResult) -> serde_json::Value {
    json!({
        "status": result.status.name(),
        "T": result.status.steps(),
        "steps_run": result.steps_run,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "final_accuracy": result.trace.last().and_then(|t| t.accuracy),
    })
}

fn cmd_run(r: &Resolved) -> Result<(), CliError> {
    let (result, num_groups) = single_run(r, &r.optimizer)?;
    let per_group = r.run().trace_groups.expect("resolved");
    let mut csv = Csv::new(r, &trace_columns(num_groups, per_group));
    for row in &result.trace {
        csv.row(&trace_cells(row, num_groups, per_group));
    }
    csv.write(&out_path(r, "trace.csv")?)?;
    write_summary(&out_path(r, "summary.json")?, r, run_summary(&result))
}

fn cmd_sweep(r: &Resolved) -> Result<(), CliError> {
    let problem = build_nqm(r)?;
    let grid = r.sweep.clone().expect("resolved");
    let setup = SweepSetup {
        problem: &problem,
        base: r.optimizer,
        grouping: r.grouping,
        delay: r.delay(),
        seed: r.seed,
        parallelism: r.parallelism,
    };
    let result = run_sweep(&setup, &grid)?;
    let cols: Vec<String> = ["eta", "momentum", "trial", "status", "T"].iter().map(|s| s.to_string()).collect();
    let mut csv = Csv::new(r, &cols);
    let mut counts = [0usize; 3];
    for cell in &result.cells {
        match cell.median.steps() {
            Some(_) => counts[0] += 1,
            None if cell.median == delaylab_core::sweep::CellOutcome::Timeout => counts[1] += 1,
            None => counts[2] += 1,
        }
        for (k, outcome) in cell.trials.iter().enumerate() {
            csv.row(&[
                fmt_f64(cell.eta),
                fmt_f64(cell.momentum),
                k.to_string(),
                outcome.status_name().to_string(),
                outcome.steps().map(|t| t.to_string()).unwrap_or_default(),
            ]);
        }
    }
    csv.write(&out_path(r, "sweep.csv")?)?;
    let body = json!({
        "t_star": result.t_star,
        "cells": result.cells.len(),
        "converged_cells": counts[0],
        "timeout_cells": counts[1],
        "diverged_cells": counts[2],
    });
    write_summary(&out_path(r, "summary.json")?, r, body)
}

fn cmd_energy(r: &Resolved) -> Result<(), CliError> {
    if r.problem().rotate == Some(true) {
        return Err(CliError::from(delaylab_core::Error::config(
            "problem.rotate",
            "energy decay is measured on axis-aligned problems",
        )));
    }
    if r.optimizer.algorithm.per_worker_velocity() {
        return Err(CliError::from(delaylab_core::Error::config(
            "algorithm",
            format!("energy needs a single shared velocity; `{}` keeps one per worker", r.optimizer.algorithm),
        )));
    }
    let problem = build_nqm(r)?;
    let n = problem.dim();
    let delay = DelayConfig::new(r.delay());
    let optimizer = Optimizer::new(r.optimizer, GroupSpec::for_flat(r.grouping, n)?, n, delay.num_workers())?;
    let run = r.run();
    let mut spec = RunSpec::new(r.max_steps()).with_schedule(run.schedule.clone().unwrap_or_default());
    spec.target_loss = run.target_loss;
    spec.divergence_factor = run.divergence_factor.expect("resolved");
    let (decay, result) =
        relative_energy_decay(&problem, optimizer, delay, &spec, Rng::substream(r.seed, NOISE_STREAM))?;

    let cols: Vec<String> = ["component_index", "eigenvalue", "geomean_ratio", "excluded_count"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut csv = Csv::new(r, &cols);
    for k in 0..n {
        csv.row(&[
            k.to_string(),
            fmt_f64(decay.eigenvalues[k]),
            fmt_f64(decay.geomean_ratio[k]),
            decay.excluded[k].to_string(),
        ]);
    }
    csv.write(&out_path(r, "energy.csv")?)?;
    let mut body = run_summary(&result);
    let map = body.as_object_mut().expect("object");
    map.insert("total_geomean_ratio".into(), json!(decay.total_geomean_ratio));
    map.insert("total_excluded".into(), json!(decay.total_excluded));
    map.insert("measured_steps".into(), json!(decay.steps));
    write_summary(&out_path(r, "summary.json")?, r, body)
}

fn cmd_ablate(r: &Resolved) -> Result<(), CliError> {
    let algorithms: Vec<Algorithm> = r.ablate.clone().expect("resolved");
    let every = r.run().trace_every.expect("resolved");
    let steps: Vec<u64> = (every..=r.max_steps()).step_by(every as usize).collect();
    let cols: Vec<String> = [
        "algorithm",
        "step",
        "lr",
        "loss",
        "energy",
        "vel_norm",
        "update_alignment",
        "alpha_mean",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut csv = Csv::new(r, &cols);
    let mut per_alg = serde_json::Map::new();
    for &alg in &algorithms {
        let cfg = r.optimizer.with_algorithm(alg);
        let (result, _) = single_run(r, &cfg)?;
        let mut rows = result.trace.iter().peekable();
        for &t in &steps {
            let mut cells = vec![alg.name().to_string(), t.to_string()];
            match rows.next_if(|row| row.step == t) {
                Some(row) => {
                    let alpha_mean = (!row.alpha.is_empty())
                        .then(|| row.alpha.iter().sum::<f64>() / row.alpha.len() as f64);
                    cells.extend([
                        fmt_f64(row.lr),
                        fmt_f64(row.loss),
                        fmt_opt(row.energy),
                        fmt_f64(row.vel_norm_total),
                        fmt_opt(row.update_alignment),
                        fmt_opt(alpha_mean),
                    ]);
                }
                // The run stopped early: keep the step axis, leave the values empty.
                None => cells.extend(std::iter::repeat_n(String::new(), 6)),
            }
            csv.row(&cells);
        }
        per_alg.insert(alg.name().to_string(), run_summary(&result));
    }
    csv.write(&out_path(r, "ablate.csv")?)?;
    write_summary(&out_path(r, "summary.json")?, r, json!({ "algorithms": per_alg }))
}
