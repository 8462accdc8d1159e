//! Experiment configuration: a single TOML file, unknown keys rejected.
//!
//! Parsing fills every default, so the parsed value re-emits as a complete
//! file that parses back to itself.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use fca_core::datagen::{CsvSchema, SynthSpec};
use fca_core::federation::{Method, RoundPlan};
use fca_core::losses::{ConsistencyDirection, LossWeights};
use fca_core::model::ModelConfig;
use fca_core::partition::{PartitionSpec, DEFAULT_TRAIN_FRACTION, SPLIT1_ALPHAS, SPLIT2_ALPHAS, SPLIT2_MISSING_PROB};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridPreset>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Evaluate every this many rounds (the last round is always evaluated).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub loss: LossSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

fn default_eval_every() -> usize {
    1
}

/// Named experiment grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPreset {
    /// Every method with the configured loss weights.
    Table4,
    /// `fca` over five (λ1, λ2) pairs, consistency on and off.
    Table5,
    /// `fca` over the three consistency directions.
    Table6,
}

pub const TABLE5_LAMBDAS: [(f64, f64); 5] = [(1.0, 1.0), (1.0, 2.0), (1.0, 3.0), (2.0, 1.0), (3.0, 1.0)];

impl GridPreset {
    pub fn methods(self) -> Vec<Method> {
        match self {
            GridPreset::Table4 => Method::ALL.to_vec(),
            GridPreset::Table5 | GridPreset::Table6 => vec![Method::Fca],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian mixture regenerated from each run seed.
    Synthetic(SynthSection),
    Csv(CsvSection),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthSection::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub num_classes: usize,
    pub dim: usize,
    pub class_counts: Vec<usize>,
    pub cluster_separation: f64,
    pub within_class_std: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthSpec::long_tail(0);
        SynthSection {
            num_classes: s.num_classes,
            dim: s.dim,
            class_counts: s.class_counts,
            cluster_separation: s.cluster_separation,
            within_class_std: s.within_class_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSection {
    pub path: PathBuf,
    pub feature_columns: Vec<String>,
    pub label_column: String,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionPreset {
    Split1,
    Split2,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub preset: PartitionPreset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_clients: Option<usize>,
    /// `custom` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_alpha: Option<Vec<f64>>,
    /// `custom` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_class_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            preset: PartitionPreset::Split2,
            num_clients: None,
            per_class_alpha: None,
            missing_class_prob: None,
            train_fraction: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
}

fn default_hidden() -> Vec<usize> {
    fca_core::model::DEFAULT_HIDDEN_DIMS.to_vec()
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_dims: default_hidden(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub total_rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Defaults to 3/4 and 7/8 of `total_rounds`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub milestones: Option<Vec<usize>>,
    pub lr_factor: f64,
    pub weight_decay: f64,
    pub focal_gamma: f64,
    pub prox_mu: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let p = RoundPlan::default();
        TrainingSection {
            total_rounds: p.total_rounds,
            local_epochs: p.local_epochs,
            batch_size: p.batch_size,
            base_lr: p.base_lr,
            milestones: None,
            lr_factor: p.lr_factor,
            weight_decay: p.weight_decay,
            focal_gamma: p.focal_gamma,
            prox_mu: p.prox_mu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPreset {
    /// λ1 = 1, λ2 = 3.
    Table5Best,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<LossPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<ConsistencyDirection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrated_consistency: Option<bool>,
}

impl LossSection {
    /// Resolved weights; only meaningful after [`ExperimentConfig::normalize`].
    pub fn weights(&self) -> LossWeights {
        let d = LossWeights::default();
        LossWeights {
            lambda1: self.lambda1.unwrap_or(d.lambda1),
            lambda2: self.lambda2.unwrap_or(d.lambda2),
            direction: self.direction.unwrap_or(d.direction),
            consistency: self.consistency.unwrap_or(d.consistency),
            calibrated_consistency: self.calibrated_consistency.unwrap_or(d.calibrated_consistency),
        }
    }
}

/// One row of the experiment matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub method: Method,
    pub loss: LossWeights,
}

fn fmt_lambda(v: f64) -> String {
    format!("{}", v)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::ConfigParse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.normalize()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies presets and fills defaults in place.
    pub fn normalize(&mut self) -> Result<(), CliError> {
        if let Some(grid) = self.grid {
            let expected = grid.methods();
            if !self.methods.is_empty() && self.methods != expected {
                return Err(CliError::Config(format!(
                    "grid {:?} fixes methods to {:?}; remove the methods list",
                    grid,
                    expected.iter().map(|m| m.name()).collect::<Vec<_>>()
                )));
            }
            self.methods = expected;
        }

        if let Some(LossPreset::Table5Best) = self.loss.preset.take() {
            if self.loss.lambda1.is_some() || self.loss.lambda2.is_some() {
                return Err(CliError::Config(
                    "loss.preset sets lambda1/lambda2; do not give them as well".into(),
                ));
            }
            self.loss.lambda1 = Some(1.0);
            self.loss.lambda2 = Some(3.0);
        }
        let w = self.loss.weights();
        self.loss = LossSection {
            preset: None,
            lambda1: Some(w.lambda1),
            lambda2: Some(w.lambda2),
            consistency: Some(w.consistency),
            direction: Some(w.direction),
            calibrated_consistency: Some(w.calibrated_consistency),
        };

        if self.training.milestones.is_none() {
            self.training.milestones = Some(RoundPlan::scaled_milestones(self.training.total_rounds));
        }

        let p = &mut self.partition;
        if p.num_clients.is_none() {
            p.num_clients = match p.preset {
                PartitionPreset::Split1 => Some(5),
                PartitionPreset::Split2 => Some(10),
                PartitionPreset::Custom => None,
            };
        }
        p.train_fraction.get_or_insert(DEFAULT_TRAIN_FRACTION);
        if p.preset == PartitionPreset::Custom {
            p.missing_class_prob.get_or_insert(0.0);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return fail("seeds must be distinct".into());
        }
        if self.methods.is_empty() {
            return fail("methods must not be empty (or set grid)".into());
        }
        if self.methods.iter().collect::<BTreeSet<_>>().len() != self.methods.len() {
            return fail("methods must be distinct".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be >= 1".into());
        }
        if self.model.hidden_dims.is_empty() || self.model.hidden_dims.contains(&0) {
            return fail("model.hidden_dims must be non-empty and positive".into());
        }
        let classes = self.num_classes();
        if let DataSource::Synthetic(_) = self.data {
            self.synth_spec(0).validate().map_err(|e| CliError::Config(format!("data: {}", e)))?;
        }
        if let DataSource::Csv(c) = &self.data {
            if c.feature_columns.is_empty() {
                return fail("data.feature_columns must not be empty".into());
            }
        }

        let p = &self.partition;
        match p.preset {
            PartitionPreset::Split1 | PartitionPreset::Split2 => {
                if p.per_class_alpha.is_some() || p.missing_class_prob.is_some() {
                    return fail(format!(
                        "partition.preset {:?} fixes per_class_alpha and missing_class_prob; use preset = \"custom\"",
                        p.preset
                    ));
                }
                if classes != 5 {
                    return fail(format!("split presets need 5 classes, data has {}", classes));
                }
            }
            PartitionPreset::Custom => match &p.per_class_alpha {
                None => return fail("partition.per_class_alpha is required for custom".into()),
                Some(a) if a.len() != classes => {
                    return fail(format!("partition.per_class_alpha has {} entries for {} classes", a.len(), classes))
                }
                Some(_) => {}
            },
        }
        if p.num_clients.is_none() {
            return fail("partition.num_clients is required for custom".into());
        }
        self.partition_spec(0).validate().map_err(|e| CliError::Config(format!("partition: {}", e)))?;

        for v in self.variants() {
            self.plan(&v, 0)
                .validate()
                .map_err(|e| CliError::Config(format!("{}: {}", v.label, e)))?;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match &self.data {
            DataSource::Synthetic(s) => s.num_classes,
            DataSource::Csv(c) => c.num_classes,
        }
    }

    pub fn synth_spec(&self, seed: u64) -> SynthSpec {
        match &self.data {
            DataSource::Synthetic(s) => SynthSpec {
                num_classes: s.num_classes,
                dim: s.dim,
                class_counts: s.class_counts.clone(),
                cluster_separation: s.cluster_separation,
                within_class_std: s.within_class_std,
                seed,
            },
            DataSource::Csv(_) => panic!("synth_spec on a CSV source"),
        }
    }

    pub fn csv_schema(&self) -> Option<(&Path, CsvSchema)> {
        match &self.data {
            DataSource::Csv(c) => Some((
                c.path.as_path(),
                CsvSchema {
                    feature_columns: c.feature_columns.clone(),
                    label_column: c.label_column.clone(),
                    num_classes: Some(c.num_classes),
                },
            )),
            DataSource::Synthetic(_) => None,
        }
    }

    pub fn partition_spec(&self, seed: u64) -> PartitionSpec {
        let p = &self.partition;
        let (alpha, prob) = match p.preset {
            PartitionPreset::Split1 => (SPLIT1_ALPHAS.to_vec(), 0.0),
            PartitionPreset::Split2 => (SPLIT2_ALPHAS.to_vec(), SPLIT2_MISSING_PROB),
            PartitionPreset::Custom => (
                p.per_class_alpha.clone().unwrap_or_default(),
                p.missing_class_prob.unwrap_or(0.0),
            ),
        };
        PartitionSpec {
            num_clients: p.num_clients.unwrap_or(0),
            per_class_alpha: alpha,
            missing_class_prob: prob,
            train_fraction: p.train_fraction.unwrap_or(DEFAULT_TRAIN_FRACTION),
            seed,
        }
    }

    pub fn model_config(&self, input_dim: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            num_classes: self.num_classes(),
            seed,
        }
    }

    pub fn plan(&self, variant: &Variant, seed: u64) -> RoundPlan {
        let t = &self.training;
        RoundPlan {
            total_rounds: t.total_rounds,
            local_epochs: t.local_epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            milestones: t
                .milestones
                .clone()
                .unwrap_or_else(|| RoundPlan::scaled_milestones(t.total_rounds)),
            lr_factor: t.lr_factor,
            weight_decay: t.weight_decay,
            method: variant.method,
            loss_weights: variant.loss,
            focal_gamma: t.focal_gamma,
            prox_mu: t.prox_mu,
            seed,
            eval_every: self.eval_every,
        }
    }

    /// The experiment matrix rows, in report order.
    pub fn variants(&self) -> Vec<Variant> {
        let base = self.loss.weights();
        match self.grid {
            None | Some(GridPreset::Table4) => self
                .methods
                .iter()
                .map(|&m| Variant {
                    label: m.name().to_string(),
                    method: m,
                    loss: base,
                })
                .collect(),
            Some(GridPreset::Table5) => TABLE5_LAMBDAS
                .iter()
                .flat_map(|&(l1, l2)| {
                    [true, false].map(|cr| Variant {
                        label: format!(
                            "fca_l1-{}_l2-{}_cr-{}",
                            fmt_lambda(l1),
                            fmt_lambda(l2),
                            if cr { "on" } else { "off" }
                        ),
                        method: Method::Fca,
                        loss: LossWeights {
                            lambda1: l1,
                            lambda2: l2,
                            consistency: cr,
                            ..base
                        },
                    })
                })
                .collect(),
            Some(GridPreset::Table6) => ConsistencyDirection::ALL
                .iter()
                .map(|&d| Variant {
                    label: format!("fca_{}", d.name()),
                    method: Method::Fca,
                    loss: LossWeights { direction: d, ..base },
                })
                .collect(),
        }
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ExperimentConfig::from_toml(&text, &path.display().to_string())
}
