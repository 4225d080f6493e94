use crate::error::{Error, Result};
use crate::harness::{run_async, DelayConfig, DEFAULT_DIVERGENCE_FACTOR, GradientOracle, LrSchedule, RunResult, RunSpec, TracePolicy};
use crate::mlp::{build_groups, evaluate, forward_backward, Batch, MlpSpec, SyntheticDataset};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::param::{GroupMode, ParamVector};
use crate::rng::Rng;

/// Weights from `N(0, 2/fan_in)`, biases zero.
pub fn he_init(spec: &MlpSpec, rng: &mut Rng) -> ParamVector {
    let mut p = ParamVector::zeros(spec.num_params());
    for layer in spec.layers() {
        let std = (2.0 / layer.fan_in as f64).sqrt();
        for x in &mut p[layer.weights] {
            *x = std * rng.standard_normal();
        }
    }
    p
}

/// Minibatch gradients over a dataset, visiting samples in a fresh random
/// order each epoch. Loss and accuracy are over the full dataset.
#[derive(Debug, Clone)]
pub struct MlpOracle<'a> {
    spec: &'a MlpSpec,
    data: &'a SyntheticDataset,
    batch_size: usize,
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl<'a> MlpOracle<'a> {
    pub fn new(spec: &'a MlpSpec, data: &'a SyntheticDataset, batch_size: usize, rng: Rng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if data.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if data.features() != spec.input_dim() || data.classes() != spec.num_classes() {
            return Err(Error::config(
                "layer_sizes",
                format!(
                    "network maps {} -> {} but the dataset has {} features and {} classes",
                    spec.input_dim(),
                    spec.num_classes(),
                    data.features(),
                    data.classes()
                ),
            ));
        }
        Ok(MlpOracle {
            spec,
            data,
            batch_size,
            rng,
            order: (0..data.len()).collect(),
            cursor: data.len(),
            inputs: Vec::with_capacity(batch_size * data.features()),
            labels: Vec::with_capacity(batch_size),
        })
    }

    fn next_batch(&mut self) {
        self.inputs.clear();
        self.labels.clear();
        for _ in 0..self.batch_size {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            self.inputs.extend_from_slice(self.data.row(i));
            self.labels.push(self.data.labels()[i]);
        }
    }
}

impl GradientOracle for MlpOracle<'_> {
    fn dim(&self) -> usize {
        self.spec.num_params()
    }

    fn gradient(&mut self, w: &ParamVector, _worker: usize, _step: u64, out: &mut ParamVector) -> Result<()> {
        self.next_batch();
        let batch = Batch {
            inputs: &self.inputs,
            labels: &self.labels,
        };
        forward_backward(self.spec, w, batch, out).map(|_| ())
    }

    fn loss(&self, w: &ParamVector) -> Result<f64> {
        match evaluate(self.spec, w, self.data.as_batch()) {
            Ok((loss, _)) => Ok(loss),
            Err(Error::NonFiniteActivation { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }

    fn accuracy(&self, w: &ParamVector) -> Option<f64> {
        evaluate(self.spec, w, self.data.as_batch()).ok().map(|(_, acc)| acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub grouping: GroupMode,
    pub delay: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    /// Record a trace row (and check the stop conditions) every this many steps.
    pub trace_every: u64,
    pub trace_groups: bool,
    pub target_loss: Option<f64>,
    pub divergence_factor: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerConfig, steps: u64, seed: u64) -> Self {
        TrainConfig {
            optimizer,
            grouping: GroupMode::PerTensor,
            delay: 0,
            steps,
            batch_size: 32,
            schedule: LrSchedule::Constant,
            trace_every: 10,
            trace_groups: true,
            target_loss: None,
            divergence_factor: DEFAULT_DIVERGENCE_FACTOR,
            seed,
        }
    }
}

/// He-initialised network trained by the delayed harness. The seed drives
/// initialisation and batch order through separate streams, so two
/// optimizers under the same seed see identical data.
pub fn train(spec: &MlpSpec, data: &SyntheticDataset, cfg: &TrainConfig) -> Result<RunResult> {
    if cfg.trace_every == 0 {
        return Err(Error::config("trace_every", "must be >= 1"));
    }
    let groups = build_groups(spec, cfg.grouping)?;
    let n = spec.num_params();
    let delay = DelayConfig::new(cfg.delay);
    let optimizer = Optimizer::new(cfg.optimizer, groups, n, delay.num_workers())?;
    let w0 = he_init(spec, &mut Rng::substream(cfg.seed, 1));
    let mut oracle = MlpOracle::new(spec, data, cfg.batch_size, Rng::substream(cfg.seed, 2))?;
    let mut run = RunSpec::new(cfg.steps)
        .with_trace(TracePolicy::Every(cfg.trace_every))
        .with_schedule(cfg.schedule.clone())
        .with_eval_every(cfg.trace_every);
    run.trace_groups = cfg.trace_groups;
    run.target_loss = cfg.target_loss;
    run.divergence_factor = cfg.divergence_factor;
    run_async(&mut oracle, optimizer, &w0, delay, &run, None)
}
