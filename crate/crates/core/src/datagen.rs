//! Synthetic long-tailed Gaussian-mixture data, CSV ingestion, and
//! train-statistics normalization.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Row-major `n x dim` features with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
    norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} values for {} rows of width {}", features.len(), labels.len(), dim),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Schema(format!("label {} out of range for {} classes", bad, num_classes)));
        }
        Ok(Dataset {
            features,
            dim,
            labels,
            num_classes,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    /// Stacks the selected rows into a `[len, dim]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let data = indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Tensor::matrix(indices.len(), self.dim, data).expect("row width invariant")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub class_counts: Vec<usize>,
    pub cluster_separation: f64,
    pub within_class_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Five classes with a ~33:1 head-to-tail ratio.
    pub fn long_tail(seed: u64) -> Self {
        SynthSpec {
            num_classes: 5,
            dim: 8,
            class_counts: vec![2000, 1200, 600, 250, 60],
            cluster_separation: 3.0,
            within_class_std: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.class_counts.len() != self.num_classes {
            return Err(Error::Config(format!(
                "need >= 2 classes with one count each, got {} classes and {} counts",
                self.num_classes,
                self.class_counts.len()
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.class_counts.contains(&0) {
            return Err(Error::Config("class counts must be positive".into()));
        }
        for (name, v) in [
            ("cluster_separation", self.cluster_separation),
            ("within_class_std", self.within_class_std),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{} must be finite and > 0, got {}", name, v)));
            }
        }
        Ok(())
    }
}

/// Class `c` samples are `N(μ_c, σ²I)`; the means are random directions
/// scaled to `cluster_separation`. Rows are grouped by class.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm * spec.cluster_separation).collect();
            }
        })
        .collect();
    let total: usize = spec.class_counts.iter().sum();
    let mut features = Vec::with_capacity(total * spec.dim);
    let mut labels = Vec::with_capacity(total);
    for (c, &count) in spec.class_counts.iter().enumerate() {
        for _ in 0..count {
            for mu in &means[c] {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(mu + spec.within_class_std * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, spec.dim, labels, spec.num_classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub label_column: String,
    /// Inferred as `max label + 1` when absent.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let shown = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::CsvParse {
        path: shown.clone(),
        row: 0,
        column: String::new(),
        detail: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::CsvParse {
            path: shown.clone(),
            row: 1,
            column: String::new(),
            detail: e.to_string(),
        })?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column {:?}", shown, name)))
    };
    let label_at = column(&schema.label_column)?;
    let feature_at = schema
        .feature_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    if feature_at.is_empty() {
        return Err(Error::Schema("no feature columns declared".into()));
    }

    let mut features = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::CsvParse {
            path: shown.clone(),
            row: e.position().map(|p| p.line() as usize).unwrap_or(0),
            column: String::new(),
            detail: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |at: usize, name: &str| {
            record.get(at).map(str::trim).ok_or_else(|| Error::CsvParse {
                path: shown.clone(),
                row: line,
                column: name.to_string(),
                detail: "missing field".into(),
            })
        };
        for (&at, name) in feature_at.iter().zip(&schema.feature_columns) {
            let text = field(at, name)?;
            let v: f64 = text.parse().map_err(|_| Error::CsvParse {
                path: shown.clone(),
                row: line,
                column: name.clone(),
                detail: format!("not a number: {:?}", text),
            })?;
            features.push(v);
        }
        let text = field(label_at, &schema.label_column)?;
        let y: i64 = text.parse().map_err(|_| Error::CsvParse {
            path: shown.clone(),
            row: line,
            column: schema.label_column.clone(),
            detail: format!("label is not an integer: {:?}", text),
        })?;
        if y < 0 {
            return Err(Error::Schema(format!("{}: line {}: negative label {}", shown, line, y)));
        }
        raw_labels.push(y);
    }
    if raw_labels.is_empty() {
        return Err(Error::Schema(format!("{}: no data rows", shown)));
    }
    let max = *raw_labels.iter().max().unwrap() as usize;
    let classes = match schema.num_classes {
        Some(c) if max >= c => {
            return Err(Error::Schema(format!(
                "{}: label {} out of range for {} declared classes",
                shown, max, c
            )))
        }
        Some(c) => c,
        None => max + 1,
    };
    let labels = raw_labels.into_iter().map(|y| y as usize).collect();
    Dataset::new(features, feature_at.len(), labels, classes.max(2))
}

/// Standardizes every row with the mean and (population) std of the
/// training rows only.
pub fn normalize(dataset: &Dataset, train_indices: &[usize]) -> Result<Dataset> {
    if train_indices.is_empty() {
        return Err(Error::Contract("normalization needs at least one training row".into()));
    }
    let d = dataset.dim;
    let n = train_indices.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in train_indices {
        for (m, x) in mean.iter_mut().zip(dataset.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for &i in train_indices {
        for ((v, x), m) in var.iter_mut().zip(dataset.row(i)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    let features = dataset
        .features
        .chunks(d)
        .flat_map(|row| {
            row.iter()
                .zip(&mean)
                .zip(&std)
                .map(|((x, m), s)| (x - m) / s)
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(Dataset {
        features,
        dim: d,
        labels: dataset.labels.clone(),
        num_classes: dataset.num_classes,
        norm: Some(NormStats { mean, std }),
    })
}
