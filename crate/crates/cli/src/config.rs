//! Experiment configuration: a TOML (or JSON) file, overridden by flags,
//! resolved into a canonical form whose JSON is embedded in every output.

use std::fs;
use std::path::{Path, PathBuf};

use delaylab_core::harness::LrSchedule;
use delaylab_core::sweep::{log_space, DEFAULT_MAX_STEPS};
use delaylab_core::{Algorithm, GroupMode, OptimizerConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    #[default]
    Nqm,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumKind {
    #[default]
    Inverse,
    Loguniform,
    Explicit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ProblemKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectrumKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eigenvalues: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    /// Every coordinate of the starting point.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotate: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer_sizes: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub separation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Load the dataset from CSV instead of generating blobs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_steps: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dc_lambda0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dc_theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grouping: Option<GroupMode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delay: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_every: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_groups: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence_factor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<LrSchedule>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum_values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials_per_cell: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algorithms: Option<Vec<Algorithm>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output directory. Not part of the embedded config.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps. Not part of the embedded config.
    #[serde(skip_serializing)]
    pub parallelism: Option<usize>,
    pub problem: ProblemSection,
    pub optimizer: OptimizerSection,
    pub run: RunSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablate: Option<AblateSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    Sweep,
    Energy,
    Train,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Sweep => "sweep",
            Command::Energy => "energy",
            Command::Train => "train",
            Command::Ablate => "ablate",
        }
    }
}

/// Flag values; any `Some` wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub eta: Option<f64>,
    pub momentum: Option<f64>,
    pub rho: Option<f64>,
    pub delay: Option<u64>,
    pub algorithm: Option<String>,
    pub grouping: Option<String>,
    pub micro_steps: Option<u32>,
    pub max_steps: Option<u64>,
    pub target_loss: Option<f64>,
}

impl ExperimentConfig {
    /// `.json` is read as JSON; `.csv` files produced by this tool are read
    /// through their embedded `# config:` line; anything else is TOML.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let parsed = match ext {
            "json" => {
                let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| config_err(path, e))?;
                // Summaries carry the config under a `config` key.
                let inner = value.get("config").cloned().unwrap_or(value);
                serde_json::from_value(inner).map_err(|e| config_err(path, e))
            }
            "csv" => {
                let line = text
                    .lines()
                    .take_while(|l| l.starts_with('#'))
                    .find_map(|l| l.strip_prefix("# config: "))
                    .ok_or_else(|| CliError::Config(format!("{}: no embedded config line", path.display())))?;
                serde_json::from_str(line).map_err(|e| config_err(path, e))
            }
            _ => toml::from_str(&text).map_err(|e| config_err(path, e)),
        };
        parsed
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        if o.parallelism.is_some() {
            self.parallelism = o.parallelism;
        }
        // Flags win over a sweep grid too.
        if let Some(s) = self.sweep.as_mut() {
            if let Some(eta) = o.eta {
                s.eta_values = Some(vec![eta]);
                s.eta_min = None;
                s.eta_max = None;
                s.eta_count = None;
            }
            if let Some(m) = o.momentum {
                s.momentum_values = Some(vec![m]);
            }
        }
        let opt = &mut self.optimizer;
        if o.eta.is_some() {
            opt.eta = o.eta;
        }
        if o.momentum.is_some() {
            opt.momentum = o.momentum;
        }
        if o.rho.is_some() {
            opt.rho = o.rho;
        }
        if o.micro_steps.is_some() {
            opt.micro_steps = o.micro_steps;
        }
        if let Some(a) = &o.algorithm {
            opt.algorithm = Some(a.parse().map_err(CliError::from)?);
        }
        if let Some(g) = &o.grouping {
            opt.grouping = Some(g.parse().map_err(CliError::from)?);
        }
        if o.delay.is_some() {
            self.run.delay = o.delay;
        }
        if o.max_steps.is_some() {
            self.run.max_steps = o.max_steps;
        }
        if o.target_loss.is_some() {
            self.run.target_loss = o.target_loss;
        }
        Ok(())
    }

    /// Fills every default relevant to `cmd`, drops what is irrelevant, and
    /// checks the result.
    pub fn resolve(mut self, cmd: Command) -> Result<Resolved, CliError> {
        let kind = match cmd {
            Command::Train => {
                if self.problem.kind == Some(ProblemKind::Nqm) {
                    return Err(field("problem.kind", "train needs an mlp problem"));
                }
                ProblemKind::Mlp
            }
            Command::Sweep | Command::Energy => {
                if self.problem.kind == Some(ProblemKind::Mlp) {
                    return Err(field("problem.kind", format!("{} needs an nqm problem", cmd.name())));
                }
                ProblemKind::Nqm
            }
            Command::Run | Command::Ablate => self.problem.kind.unwrap_or_default(),
        };
        self.problem.kind = Some(kind);
        let seed = *self.seed.get_or_insert(0);
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        let parallelism = self.parallelism;
        if parallelism == Some(0) {
            return Err(field("parallelism", "must be >= 1"));
        }

        let p = &mut self.problem;
        match kind {
            ProblemKind::Nqm => {
                for (name, set) in [
                    ("layer_sizes", p.layer_sizes.is_some()),
                    ("samples", p.samples.is_some()),
                    ("separation", p.separation.is_some()),
                    ("batch_size", p.batch_size.is_some()),
                    ("data_csv", p.data_csv.is_some()),
                ] {
                    if set {
                        return Err(field(&format!("problem.{name}"), "only applies to mlp problems"));
                    }
                }
                let spectrum = *p.spectrum.get_or_insert_default();
                match spectrum {
                    SpectrumKind::Explicit => {
                        let eig = p
                            .eigenvalues
                            .as_ref()
                            .ok_or_else(|| field("problem.eigenvalues", "required for an explicit spectrum"))?;
                        if let Some(d) = p.dim {
                            if d != eig.len() {
                                return Err(field("problem.dim", "does not match the number of eigenvalues"));
                            }
                        }
                        p.dim = Some(eig.len());
                        p.lo = None;
                        p.hi = None;
                    }
                    SpectrumKind::Inverse => {
                        p.dim.get_or_insert(100);
                        p.lo = None;
                        p.hi = None;
                        p.eigenvalues = None;
                    }
                    SpectrumKind::Loguniform => {
                        p.dim.get_or_insert(100);
                        p.lo.get_or_insert(1e-4);
                        p.hi.get_or_insert(1.0);
                        p.eigenvalues = None;
                    }
                }
                p.noise_sigma.get_or_insert(0.0);
                p.w0.get_or_insert(1.0);
                p.rotate.get_or_insert(false);
            }
            ProblemKind::Mlp => {
                for (name, set) in [
                    ("spectrum", p.spectrum.is_some()),
                    ("dim", p.dim.is_some()),
                    ("lo", p.lo.is_some()),
                    ("hi", p.hi.is_some()),
                    ("eigenvalues", p.eigenvalues.is_some()),
                    ("noise_sigma", p.noise_sigma.is_some()),
                    ("w0", p.w0.is_some()),
                    ("rotate", p.rotate.is_some()),
                ] {
                    if set {
                        return Err(field(&format!("problem.{name}"), "only applies to nqm problems"));
                    }
                }
                p.layer_sizes.get_or_insert_with(|| vec![8, 32, 32, 5]);
                if p.data_csv.is_none() {
                    p.samples.get_or_insert(2000);
                    p.separation.get_or_insert(1.5);
                }
                p.batch_size.get_or_insert(32);
            }
        }

        let o = &mut self.optimizer;
        let algorithm = *o.algorithm.get_or_insert(Algorithm::Sgdm);
        let grouping = *o.grouping.get_or_insert(match kind {
            ProblemKind::Nqm => GroupMode::Global,
            ProblemKind::Mlp => GroupMode::PerTensor,
        });
        if kind == ProblemKind::Nqm && !matches!(grouping, GroupMode::Global | GroupMode::PerElement) {
            return Err(field("grouping", "nqm problems support global or per_element"));
        }
        let mut optimizer = OptimizerConfig::new(algorithm, 1.0, 0.0);
        optimizer.rho = *o.rho.get_or_insert(optimizer.rho);
        optimizer.epsilon = *o.epsilon.get_or_insert(optimizer.epsilon);
        optimizer.weight_decay = *o.weight_decay.get_or_insert(0.0);
        optimizer.micro_steps = *o.micro_steps.get_or_insert(1);
        optimizer.dc_lambda0 = *o.dc_lambda0.get_or_insert(optimizer.dc_lambda0);
        optimizer.dc_theta = *o.dc_theta.get_or_insert(optimizer.dc_theta);

        let mut sweep = None;
        if cmd == Command::Sweep {
            // An axis left open in [sweep] is pinned by a fixed optimizer value.
            let s = self.sweep.get_or_insert_with(SweepSection::default);
            let has_range = s.eta_min.is_some() && s.eta_max.is_some() && s.eta_count.is_some();
            if let Some(eta) = o.eta.take() {
                if s.eta_values.is_none() && !has_range {
                    s.eta_values = Some(vec![eta]);
                }
            }
            if s.eta_values.is_none() {
                match (s.eta_min, s.eta_max, s.eta_count) {
                    (Some(lo), Some(hi), Some(n)) => s.eta_values = Some(log_space(lo, hi, n)?),
                    _ => {
                        return Err(field(
                            "eta",
                            "sweep needs sweep.eta_values or sweep.eta_min/eta_max/eta_count",
                        ))
                    }
                }
            }
            s.eta_min = None;
            s.eta_max = None;
            s.eta_count = None;
            if let Some(m) = o.momentum.take() {
                s.momentum_values.get_or_insert_with(|| vec![m]);
            }
            s.momentum_values
                .get_or_insert_with(|| vec![0.0, 0.3, 0.6, 0.9, 0.95, 0.99]);
            s.trials_per_cell.get_or_insert(1);
            sweep = Some(s.clone());
        } else {
            self.sweep = None;
            let eta = o
                .eta
                .ok_or_else(|| field("eta", "missing required field optimizer.eta (or pass --eta)"))?;
            optimizer.eta = eta;
            optimizer.momentum = *o.momentum.get_or_insert(0.0);
            optimizer.validate()?;
        }

        let mut ablate = None;
        if cmd == Command::Ablate {
            let a = self.ablate.get_or_insert_with(AblateSection::default);
            let algs = a.algorithms.get_or_insert_with(|| {
                vec![
                    Algorithm::Sgdm,
                    Algorithm::Ab,
                    Algorithm::AbVelOnly,
                    Algorithm::AbWeightOnly,
                    Algorithm::Sa,
                    Algorithm::Sm,
                    Algorithm::Dana,
                    Algorithm::Dc,
                ]
            });
            if algs.is_empty() {
                return Err(field("ablate.algorithms", "need at least one algorithm"));
            }
            ablate = Some(algs.clone());
        } else {
            self.ablate = None;
        }

        let r = &mut self.run;
        r.delay.get_or_insert(0);
        let max_steps = *r.max_steps.get_or_insert(match cmd {
            Command::Sweep => DEFAULT_MAX_STEPS,
            _ => 1000,
        });
        if max_steps < 1 {
            return Err(field("max_steps", "must be >= 1"));
        }
        if let Some(t) = r.target_loss {
            if !(t > 0.0) {
                return Err(field("target_loss", "must be > 0"));
            }
        } else if cmd == Command::Sweep {
            return Err(field("target_loss", "sweep needs run.target_loss (or pass --target-loss)"));
        }
        let trace_every = *r.trace_every.get_or_insert(match kind {
            ProblemKind::Nqm => 1,
            ProblemKind::Mlp => 10,
        });
        if trace_every < 1 {
            return Err(field("trace_every", "must be >= 1"));
        }
        r.trace_groups.get_or_insert(true);
        let factor = *r.divergence_factor.get_or_insert(delaylab_core::harness::DEFAULT_DIVERGENCE_FACTOR);
        if !(factor > 1.0) {
            return Err(field("divergence_factor", "must be > 1"));
        }
        r.schedule.get_or_insert_default().validate()?;

        let sweep_grid = match sweep {
            Some(s) => {
                let grid = delaylab_core::sweep::SweepGrid {
                    eta_values: s.eta_values.expect("filled"),
                    momentum_values: s.momentum_values.expect("filled"),
                    max_steps,
                    target: self.run.target_loss.expect("checked"),
                    trials_per_cell: s.trials_per_cell.expect("filled"),
                };
                grid.validate()?;
                let mut probe = optimizer;
                probe.eta = grid.eta_values[0];
                probe.momentum = grid.momentum_values[0];
                probe.validate()?;
                Some(grid)
            }
            None => None,
        };

        self.out = None;
        self.parallelism = None;
        Ok(Resolved {
            command: cmd,
            seed,
            out,
            parallelism,
            optimizer,
            grouping,
            sweep: sweep_grid,
            ablate,
            config: self,
        })
    }
}

fn field(name: &str, message: impl Into<String>) -> CliError {
    CliError::from(delaylab_core::Error::config(name, message))
}

fn config_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

/// A fully resolved configuration plus the typed values commands need.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub command: Command,
    pub seed: u64,
    pub out: PathBuf,
    pub parallelism: Option<usize>,
    /// For sweeps `eta`/`momentum` are placeholders replaced per cell.
    pub optimizer: OptimizerConfig,
    pub grouping: GroupMode,
    pub sweep: Option<delaylab_core::sweep::SweepGrid>,
    pub ablate: Option<Vec<Algorithm>>,
    /// Canonical config, embedded in outputs.
    pub config: ExperimentConfig,
}

impl Resolved {
    pub fn problem(&self) -> &ProblemSection {
        &self.config.problem
    }

    pub fn run(&self) -> &RunSection {
        &self.config.run
    }

    pub fn delay(&self) -> u64 {
        self.config.run.delay.expect("resolved")
    }

    pub fn max_steps(&self) -> u64 {
        self.config.run.max_steps.expect("resolved")
    }

    /// Compact JSON of the canonical config.
    pub fn config_json(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }
}
