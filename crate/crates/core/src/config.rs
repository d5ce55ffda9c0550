//! Experiment configuration.
//!
//! Configs are TOML documents with the sections `[data]`, `[noise]`,
//! `[model]`, `[train]`, `[cmrm]`, `[eval]`, `[output]` and `[sweep]`, plus a
//! top-level `seed`. Unknown keys are rejected and every error names the
//! offending key.
//!
//! ```toml
//! seed = 7
//!
//! [data.synth]
//! num_classes = 5
//! dim = 10
//! per_class_count = 400
//! class_separation = 2.5
//!
//! [noise]
//! kind = "symmetric"
//! rate = 0.3
//!
//! [model]
//! architecture = "two_layer_mlp"
//! hidden = 32
//!
//! [cmrm]
//! kind = "multiclass"
//! alpha = 0.15
//! lambda = 0.1
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cmrm::{BinaryCmrmConfig, CmrmConfig};
use crate::conformal::DEFAULT_COVERAGE;
use crate::data::{self, NoisyDataset, SplitTag, SynthSpec, DEFAULT_FRACTIONS};
use crate::error::{Error, Result};
use crate::losses::{BaseLossSpec, DEFAULT_FOCAL_GAMMA, DEFAULT_GCE_Q, DEFAULT_LDAM_SCALE};
use crate::model::{Architecture, ModelParams};
use crate::noise::{NoiseKind, NoiseSpec};
use crate::rng::{substream, Stream};
use crate::trainer::{Regularizer, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub noise: Option<NoiseSection>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub cmrm: Option<CmrmSection>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub csv: Option<CsvSection>,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 4],
    #[serde(default = "default_true")]
    pub standardize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class_count: usize,
    pub class_separation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSection {
    pub path: PathBuf,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default)]
    pub group_column: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKindName {
    Symmetric,
    Circular,
    GroupConditional,
    BinaryFlip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: NoiseKindName,
    pub rate: f64,
    /// Label to group map for group-conditional noise; when absent the
    /// groups come from the data's group column.
    #[serde(default)]
    pub label_groups: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureName {
    Linear,
    TwoLayerMlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_architecture")]
    pub architecture: ArchitectureName,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            architecture: default_architecture(),
            hidden: default_hidden(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLossName {
    Ce,
    Focal,
    Gce,
    Ldam,
    Hinge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub warmup_epochs: usize,
    pub base_loss: BaseLossName,
    pub focal_gamma: f64,
    pub gce_q: f64,
    pub ldam_scale: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_milestones: t.lr_milestones,
            lr_decay: t.lr_decay,
            warmup_epochs: t.warmup_epochs,
            base_loss: BaseLossName::Ce,
            focal_gamma: DEFAULT_FOCAL_GAMMA,
            gce_q: DEFAULT_GCE_Q,
            ldam_scale: DEFAULT_LDAM_SCALE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmrmKind {
    Multiclass,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmrmSection {
    pub kind: CmrmKind,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub temp: Option<f64>,
    #[serde(default)]
    pub grad_through_threshold: bool,
    #[serde(default)]
    pub alpha_pos: Option<f64>,
    #[serde(default)]
    pub alpha_neg: Option<f64>,
    #[serde(default)]
    pub lambda_pos: Option<f64>,
    #[serde(default)]
    pub lambda_neg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub coverage_target: f64,
    pub with_conformal: bool,
    pub histogram_bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            coverage_target: DEFAULT_COVERAGE,
            with_conformal: true,
            histogram_bins: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// Also write the margin histogram CSV.
    pub margins: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("runs"),
            margins: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepPreset {
    #[default]
    Ce,
    /// Lambdas scaled by 0.1.
    Gce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub preset: SweepPreset,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl SweepSection {
    /// The lambda grid after applying the preset.
    pub fn effective_lambdas(&self) -> Vec<f64> {
        match self.preset {
            SweepPreset::Ce => self.lambdas.clone(),
            SweepPreset::Gce => self.lambdas.iter().map(|l| l * 0.1).collect(),
        }
    }
}

/// The lambda and alpha grid searched by default.
pub const DEFAULT_GRID: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.25];

fn default_fractions() -> [f64; 4] {
    DEFAULT_FRACTIONS
}
fn default_true() -> bool {
    true
}
fn default_label_column() -> String {
    "label".into()
}
fn default_architecture() -> ArchitectureName {
    ArchitectureName::TwoLayerMlp
}
fn default_hidden() -> usize {
    32
}
fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            let reason = inner.message().trim().to_string();
            Error::Config {
                key: if key == "." { "<document>".into() } else { key },
                reason,
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks cross-field constraints that do not need the data.
    pub fn validate(&self) -> Result<()> {
        match (&self.data.synth, &self.data.csv) {
            (Some(s), None) => {
                if s.num_classes < 2 || s.dim == 0 || s.per_class_count == 0 {
                    return Err(Error::config(
                        "data.synth",
                        "num_classes >= 2, dim >= 1, per_class_count >= 1",
                    ));
                }
                if !(s.class_separation.is_finite() && s.class_separation >= 0.0) {
                    return Err(Error::config("data.synth.class_separation", "must be >= 0"));
                }
            }
            (None, Some(_)) => {}
            _ => {
                return Err(Error::config(
                    "data",
                    "exactly one of [data.synth] or [data.csv] is required",
                ))
            }
        }
        if let Some(n) = &self.noise {
            if !(0.0..=1.0).contains(&n.rate) {
                return Err(Error::config("noise.rate", "must lie in [0, 1]"));
            }
        }
        if self.model.architecture == ArchitectureName::TwoLayerMlp && self.model.hidden == 0 {
            return Err(Error::config("model.hidden", "must be >= 1"));
        }
        if !(self.eval.coverage_target > 0.0 && self.eval.coverage_target < 1.0) {
            return Err(Error::config("eval.coverage_target", "must lie in (0, 1)"));
        }
        if self.eval.histogram_bins == 0 {
            return Err(Error::config("eval.histogram_bins", "must be >= 1"));
        }
        if let Some(c) = &self.cmrm {
            match c.kind {
                CmrmKind::Multiclass => self.multiclass_cmrm(c)?.validate()?,
                CmrmKind::Binary => self.binary_cmrm(c)?.validate()?,
            }
        }
        if let Some(s) = &self.sweep {
            if s.lambdas.is_empty() {
                return Err(Error::config("sweep.lambdas", "grid must be nonempty"));
            }
            if s.alphas.is_empty() {
                return Err(Error::config("sweep.alphas", "grid must be nonempty"));
            }
            if s.workers == 0 {
                return Err(Error::config("sweep.workers", "must be >= 1"));
            }
        }
        Ok(())
    }

    fn multiclass_cmrm(&self, c: &CmrmSection) -> Result<CmrmConfig> {
        for (key, v) in [
            ("cmrm.alpha_pos", c.alpha_pos),
            ("cmrm.alpha_neg", c.alpha_neg),
            ("cmrm.lambda_pos", c.lambda_pos),
            ("cmrm.lambda_neg", c.lambda_neg),
        ] {
            if v.is_some() {
                return Err(Error::config(key, "only valid for kind = \"binary\""));
            }
        }
        let d = CmrmConfig::default();
        Ok(CmrmConfig {
            alpha: c.alpha.unwrap_or(d.alpha),
            lambda: c.lambda.unwrap_or(d.lambda),
            temp: c.temp.unwrap_or(d.temp),
            grad_through_threshold: c.grad_through_threshold,
        })
    }

    fn binary_cmrm(&self, c: &CmrmSection) -> Result<BinaryCmrmConfig> {
        for (key, present) in [
            ("cmrm.alpha", c.alpha.is_some()),
            ("cmrm.lambda", c.lambda.is_some()),
            ("cmrm.temp", c.temp.is_some()),
            ("cmrm.grad_through_threshold", c.grad_through_threshold),
        ] {
            if present {
                return Err(Error::config(key, "only valid for kind = \"multiclass\""));
            }
        }
        let need = |key: &str, v: Option<f64>| {
            v.ok_or_else(|| Error::config(key, "required for kind = \"binary\""))
        };
        Ok(BinaryCmrmConfig {
            alpha_pos: need("cmrm.alpha_pos", c.alpha_pos)?,
            alpha_neg: need("cmrm.alpha_neg", c.alpha_neg)?,
            lambda_pos: need("cmrm.lambda_pos", c.lambda_pos)?,
            lambda_neg: need("cmrm.lambda_neg", c.lambda_neg)?,
        })
    }

    /// A copy with every randomness source keyed to `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// A copy with the multi-class (or binary, with equal class values)
    /// alpha and lambda replaced.
    pub fn with_cmrm_point(&self, lambda: f64, alpha: f64) -> Self {
        let mut cfg = self.clone();
        let section = cfg.cmrm.get_or_insert(CmrmSection {
            kind: CmrmKind::Multiclass,
            alpha: None,
            lambda: None,
            temp: None,
            grad_through_threshold: false,
            alpha_pos: None,
            alpha_neg: None,
            lambda_pos: None,
            lambda_neg: None,
        });
        match section.kind {
            CmrmKind::Multiclass => {
                section.alpha = Some(alpha);
                section.lambda = Some(lambda);
            }
            CmrmKind::Binary => {
                section.alpha_pos = Some(alpha);
                section.alpha_neg = Some(alpha);
                section.lambda_pos = Some(lambda);
                section.lambda_neg = Some(lambda);
            }
        }
        cfg
    }

    /// Loads or generates the data, splits, standardizes and corrupts the
    /// training labels.
    pub fn build_dataset(&self) -> Result<NoisyDataset> {
        let mut ds = match (&self.data.synth, &self.data.csv) {
            (Some(s), None) => data::generate_gaussian_blobs(&SynthSpec {
                num_classes: s.num_classes,
                dim: s.dim,
                per_class_count: s.per_class_count,
                class_separation: s.class_separation,
                seed: self.seed,
            })?,
            (None, Some(c)) => data::load_csv(&c.path, &c.label_column, c.group_column.as_deref())?,
            _ => {
                return Err(Error::config(
                    "data",
                    "exactly one of [data.synth] or [data.csv] is required",
                ))
            }
        };
        data::split(&mut ds, self.data.fractions, self.seed)?;
        if self.data.standardize {
            data::standardize(&mut ds)?;
        }
        if let Some(n) = &self.noise {
            let kind = match n.kind {
                NoiseKindName::Symmetric => NoiseKind::Symmetric,
                NoiseKindName::Circular => NoiseKind::Circular,
                NoiseKindName::BinaryFlip => NoiseKind::BinaryFlip,
                NoiseKindName::GroupConditional => NoiseKind::GroupConditional {
                    group_of: match &n.label_groups {
                        Some(g) => g.clone(),
                        None => ds.label_groups()?,
                    },
                },
            };
            ds.inject_train_noise(&NoiseSpec {
                kind,
                rate: n.rate,
                seed: self.seed,
            })?;
        }
        if let Some(CmrmSection {
            kind: CmrmKind::Binary,
            ..
        }) = &self.cmrm
        {
            if ds.num_classes != 2 {
                return Err(Error::config(
                    "cmrm.kind",
                    "binary CMRM requires exactly 2 classes",
                ));
            }
        }
        Ok(ds)
    }

    pub fn architecture(&self) -> Architecture {
        match self.model.architecture {
            ArchitectureName::Linear => Architecture::Linear,
            ArchitectureName::TwoLayerMlp => Architecture::TwoLayerMlp {
                hidden: self.model.hidden,
            },
        }
    }

    pub fn init_model(&self, dataset: &NoisyDataset) -> Result<ModelParams> {
        ModelParams::init(
            self.architecture(),
            dataset.dim(),
            dataset.num_classes,
            &mut substream(self.seed, Stream::Init),
        )
    }

    /// The trainer configuration; LDAM class counts come from the observed
    /// training labels.
    pub fn train_config(&self, dataset: &NoisyDataset) -> Result<TrainConfig> {
        let t = &self.train;
        let base_loss = match t.base_loss {
            BaseLossName::Ce => BaseLossSpec::Ce,
            BaseLossName::Focal => BaseLossSpec::Focal {
                gamma: t.focal_gamma,
            },
            BaseLossName::Gce => BaseLossSpec::Gce { q: t.gce_q },
            BaseLossName::Hinge => BaseLossSpec::Hinge,
            BaseLossName::Ldam => {
                let mut counts = vec![0usize; dataset.num_classes];
                for i in dataset.indices(SplitTag::Train) {
                    counts[dataset.observed_labels[i]] += 1;
                }
                BaseLossSpec::Ldam {
                    margin_scale: t.ldam_scale,
                    class_counts: counts,
                }
            }
        };
        let regularizer = match &self.cmrm {
            None => Regularizer::None,
            Some(c) => match c.kind {
                CmrmKind::Multiclass => Regularizer::MultiClass(self.multiclass_cmrm(c)?),
                CmrmKind::Binary => Regularizer::Binary(self.binary_cmrm(c)?),
            },
        };
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            lr_milestones: t.lr_milestones.clone(),
            lr_decay: t.lr_decay,
            seed: self.seed,
            base_loss,
            regularizer,
            warmup_epochs: t.warmup_epochs,
        };
        cfg.validate(dataset.num_classes)?;
        Ok(cfg)
    }
}
