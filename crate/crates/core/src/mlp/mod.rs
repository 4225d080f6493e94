//! A small dense ReLU network with softmax cross-entropy, written out by
//! hand so every gradient is exact and cheap to check.
//!
//! Parameters are flat. Layer `l` stores its weight matrix (rows are output
//! neurons, row-major) followed by its bias vector.

mod data;
mod train;

pub use data::SyntheticDataset;
pub use train::{he_init, train, MlpOracle, TrainConfig};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{GroupMode, GroupSpec, ParamVector};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
}

/// Where one layer lives inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

impl MlpSpec {
    /// `layer_sizes` runs from the input width to the number of classes.
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config("layer_sizes", "need at least an input and an output size"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::config("layer_sizes", "all sizes must be >= 1"));
        }
        Ok(MlpSpec { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|p| {
                let (fan_in, fan_out) = (p[0], p[1]);
                let weights = offset..offset + fan_in * fan_out;
                let bias = weights.end..weights.end + fan_out;
                offset = bias.end;
                LayerLayout {
                    fan_in,
                    fan_out,
                    weights,
                    bias,
                }
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

/// Braking groups for the network's parameter layout.
pub fn build_groups(spec: &MlpSpec, mode: GroupMode) -> Result<GroupSpec> {
    let n = spec.num_params();
    match mode {
        GroupMode::Global => Ok(GroupSpec::global(n)),
        GroupMode::PerElement => Ok(GroupSpec::per_element(n)),
        GroupMode::PerTensor => {
            let ranges = spec.layers().into_iter().flat_map(|l| [l.weights, l.bias]).collect();
            GroupSpec::from_ranges(mode, n, ranges)
        }
        GroupMode::PerFilter => {
            let mut ranges = Vec::new();
            for l in spec.layers() {
                for row in 0..l.fan_out {
                    let start = l.weights.start + row * l.fan_in;
                    ranges.push(start..start + l.fan_in);
                }
                ranges.push(l.bias);
            }
            GroupSpec::from_ranges(mode, n, ranges)
        }
    }
}

/// Inputs (row-major, one sample per row) with their class labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a [f64],
    pub labels: &'a [usize],
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

struct Workspace {
    /// Post-activation values per layer; `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    /// Pre-activation values per weight layer.
    pre: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    fn new(spec: &MlpSpec) -> Self {
        let widest = *spec.layer_sizes.iter().max().expect("nonempty");
        Workspace {
            acts: spec.layer_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            pre: spec.layer_sizes[1..].iter().map(|&s| vec![0.0; s]).collect(),
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
        }
    }
}

fn check_batch(spec: &MlpSpec, params: &[f64], batch: &Batch<'_>) -> Result<()> {
    if params.len() != spec.num_params() {
        return Err(Error::contract(format!(
            "expected {} parameters, got {}",
            spec.num_params(),
            params.len()
        )));
    }
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    if batch.inputs.len() != batch.len() * spec.input_dim() {
        return Err(Error::contract("batch inputs do not match the input width"));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= spec.num_classes()) {
        return Err(Error::contract(format!("label {y} out of range")));
    }
    Ok(())
}

/// Forward pass for one sample; returns the logits' log-sum-exp.
fn forward(layers: &[LayerLayout], params: &[f64], x: &[f64], ws: &mut Workspace) -> Result<f64> {
    ws.acts[0].copy_from_slice(x);
    let last = layers.len() - 1;
    for (l, layout) in layers.iter().enumerate() {
        let (below, above) = ws.acts.split_at_mut(l + 1);
        let input = &below[l];
        let w = &params[layout.weights.clone()];
        let b = &params[layout.bias.clone()];
        let z = &mut ws.pre[l];
        for (j, zj) in z.iter_mut().enumerate() {
            let row = &w[j * layout.fan_in..(j + 1) * layout.fan_in];
            *zj = b[j] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: l + 1 });
        }
        let out = &mut above[0];
        if l == last {
            out.copy_from_slice(z);
        } else {
            for (o, &zj) in out.iter_mut().zip(z.iter()) {
                *o = zj.max(0.0);
            }
        }
    }
    let logits = &ws.acts[layers.len()];
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln())
}

/// Mean cross-entropy over `batch`, writing its exact gradient into `grad`.
pub fn forward_backward(spec: &MlpSpec, params: &ParamVector, batch: Batch<'_>, grad: &mut ParamVector) -> Result<f64> {
    check_batch(spec, params, &batch)?;
    if grad.len() != params.len() {
        return Err(Error::contract("gradient buffer has the wrong length"));
    }
    let layers = spec.layers();
    let mut ws = Workspace::new(spec);
    grad.as_mut_slice().iter_mut().for_each(|g| *g = 0.0);
    let d = spec.input_dim();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;

    for (i, &y) in batch.labels.iter().enumerate() {
        let lse = forward(&layers, params, &batch.inputs[i * d..(i + 1) * d], &mut ws)?;
        let logits = &ws.acts[layers.len()];
        total += lse - logits[y];

        ws.delta.clear();
        ws.delta.extend(logits.iter().map(|z| (z - lse).exp() * scale));
        ws.delta[y] -= scale;

        for (l, layout) in layers.iter().enumerate().rev() {
            let input = &ws.acts[l];
            let gw = &mut grad[layout.weights.clone()];
            for (j, &dj) in ws.delta.iter().enumerate() {
                if dj != 0.0 {
                    let row = &mut gw[j * layout.fan_in..(j + 1) * layout.fan_in];
                    for (g, &a) in row.iter_mut().zip(input) {
                        *g += dj * a;
                    }
                }
            }
            for (g, &dj) in grad[layout.bias.clone()].iter_mut().zip(&ws.delta) {
                *g += dj;
            }
            if l == 0 {
                break;
            }
            let w = &params[layout.weights.clone()];
            ws.delta_prev.clear();
            ws.delta_prev.resize(layout.fan_in, 0.0);
            for (j, &dj) in ws.delta.iter().enumerate() {
                if dj != 0.0 {
                    let row = &w[j * layout.fan_in..(j + 1) * layout.fan_in];
                    for (p, &wk) in ws.delta_prev.iter_mut().zip(row) {
                        *p += dj * wk;
                    }
                }
            }
            for (p, &z) in ws.delta_prev.iter_mut().zip(&ws.pre[l - 1]) {
                if z <= 0.0 {
                    *p = 0.0;
                }
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
    }
    Ok(total * scale)
}

/// Mean cross-entropy and accuracy over `batch`, without gradients.
pub fn evaluate(spec: &MlpSpec, params: &ParamVector, batch: Batch<'_>) -> Result<(f64, f64)> {
    check_batch(spec, params, &batch)?;
    let layers = spec.layers();
    let mut ws = Workspace::new(spec);
    let d = spec.input_dim();
    let mut total = 0.0;
    let mut correct = 0usize;
    for (i, &y) in batch.labels.iter().enumerate() {
        let lse = forward(&layers, params, &batch.inputs[i * d..(i + 1) * d], &mut ws)?;
        let logits = &ws.acts[layers.len()];
        total += lse - logits[y];
        let pred = logits
            .iter()
            .enumerate()
            .fold(0, |best, (k, &z)| if z > logits[best] { k } else { best });
        if pred == y {
            correct += 1;
        }
    }
    let n = batch.len() as f64;
    Ok((total / n, correct as f64 / n))
}
