use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::mlp::Batch;
use crate::rng::Rng;

/// Labelled samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    features: usize,
    classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl SyntheticDataset {
    pub fn new(features: usize, classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if features == 0 || classes == 0 {
            return Err(Error::Data("features and classes must be >= 1".into()));
        }
        if inputs.len() != labels.len() * features {
            return Err(Error::Data(format!(
                "{} input values do not fill {} rows of {features}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
        }
        Ok(SyntheticDataset {
            features,
            classes,
            inputs,
            labels,
        })
    }

    /// Gaussian-blob mixture: one unit-variance blob per class, centers
    /// drawn from `N(0, separation²·I)`. Sample `i` has label `i mod classes`.
    pub fn blobs(samples: usize, features: usize, classes: usize, separation: f64, seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::config("samples", "must be >= 1"));
        }
        if !(separation >= 0.0 && separation.is_finite()) {
            return Err(Error::config("separation", "must be >= 0"));
        }
        let mut rng = Rng::new(seed);
        let centers: Vec<f64> = (0..classes * features)
            .map(|_| separation * rng.standard_normal())
            .collect();
        let mut inputs = Vec::with_capacity(samples * features);
        let mut labels = Vec::with_capacity(samples);
        for i in 0..samples {
            let y = i % classes.max(1);
            labels.push(y);
            for f in 0..features {
                inputs.push(centers.get(y * features + f).copied().unwrap_or(0.0) + rng.standard_normal());
            }
        }
        Self::new(features, classes, inputs, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.features..(i + 1) * self.features]
    }

    pub fn as_batch(&self) -> Batch<'_> {
        Batch {
            inputs: &self.inputs,
            labels: &self.labels,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// `label,x0,x1,...` with a header row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let header: Vec<String> = (0..self.features).map(|f| format!("x{f}")).collect();
        writeln!(out, "label,{}", header.join(","))?;
        for (i, y) in self.labels.iter().enumerate() {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{y},{}", row.join(","))?;
        }
        Ok(())
    }

    /// Reads the format produced by [`write_csv`](Self::write_csv). The class
    /// count is one more than the largest label unless `classes` is given.
    pub fn read_csv<R: BufRead>(input: R, classes: Option<usize>) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty dataset file".into()))?
            .map_err(|e| Error::Data(e.to_string()))?;
        let features = header.split(',').count().saturating_sub(1);
        if !header.starts_with("label,") || features == 0 {
            return Err(Error::Data(format!("unexpected header `{header}`")));
        }
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::Data(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut cells = line.split(',');
            let bad = |what: &str| Error::Data(format!("line {}: {what}", n + 2));
            let y: usize = cells
                .next()
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| bad("bad label"))?;
            labels.push(y);
            let before = inputs.len();
            for c in cells {
                inputs.push(c.trim().parse::<f64>().map_err(|_| bad("bad value"))?);
            }
            if inputs.len() - before != features {
                return Err(bad("wrong number of columns"));
            }
        }
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        Self::new(features, classes, inputs, labels)
    }
}
