//! Mini-batch SGD over the base loss plus the conformal margin risk.
//!
//! Each epoch shuffles the training rows, walks full batches and a final
//! partial batch, and for every batch:
//!
//! 1. computes logits, the base loss and its logit gradient;
//! 2. computes the batch-level threshold and the CMRM term on the same batch;
//! 3. backpropagates the summed logit gradient and takes a momentum step
//!    `v <- mu v - lr (g + wd theta)`, `theta <- theta + v`.
//!
//! The learning rate is multiplied by the decay factor at every milestone
//! epoch. No randomness is consumed by the regularizer, so a run with
//! `lambda = 0` follows the baseline trajectory exactly.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cmrm::{self, BinaryCmrmConfig, CmrmConfig};
use crate::conformal::{self, PredictionSet};
use crate::data::{NoisyDataset, SplitTag};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{self, BaseLossSpec};
use crate::metrics::{self, MetricReport};
use crate::model::{self, positive_probability, ModelParams, ProbVector};
use crate::rng::{substream, Stream};

/// The regularizer added to the base loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    None,
    MultiClass(CmrmConfig),
    Binary(BinaryCmrmConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    pub base_loss: BaseLossSpec,
    pub regularizer: Regularizer,
    /// Epochs trained on the base loss alone before the regularizer starts.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 2e-4,
            lr_milestones: Vec::new(),
            lr_decay: 0.01,
            seed: 0,
            base_loss: BaseLossSpec::Ce,
            regularizer: Regularizer::None,
            warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("train.lr_decay", "must lie in (0, 1]"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1])
            || self.lr_milestones.iter().any(|&m| m >= self.epochs)
        {
            return Err(Error::config(
                "train.lr_milestones",
                "must be strictly increasing and below the epoch count",
            ));
        }
        self.base_loss.validate(num_classes)?;
        match &self.regularizer {
            Regularizer::None => Ok(()),
            Regularizer::MultiClass(c) => c.validate(),
            Regularizer::Binary(c) => {
                if num_classes != 2 {
                    return Err(Error::config(
                        "cmrm.kind",
                        "binary CMRM requires exactly 2 classes",
                    ));
                }
                c.validate()
            }
        }
    }
}

/// Per-epoch training observables. Losses are sample-weighted batch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub cl_loss: f64,
    /// CMRM term; for binary runs it already includes the class lambdas.
    pub cr_loss: Option<f64>,
    pub tau: Option<f64>,
    pub tau_pos: Option<f64>,
    pub tau_neg: Option<f64>,
    pub filter_noise_ratio: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_auroc: Option<f64>,
}

pub const EPOCH_CSV_HEADER: [&str; 10] = [
    "epoch",
    "total_loss",
    "cl_loss",
    "cr_loss",
    "tau",
    "tau_pos",
    "tau_neg",
    "filter_noise_ratio",
    "val_acc",
    "val_auroc",
];

/// Writes the epoch log; inapplicable fields are empty cells.
pub fn write_epoch_csv<W: Write>(records: &[EpochRecord], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(EPOCH_CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        w.write_record(&[
            r.epoch.to_string(),
            r.total_loss.to_string(),
            r.cl_loss.to_string(),
            opt(r.cr_loss),
            opt(r.tau),
            opt(r.tau_pos),
            opt(r.tau_neg),
            opt(r.filter_noise_ratio),
            opt(r.val_acc),
            opt(r.val_auroc),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[derive(Default)]
struct EpochAccumulator {
    total: f64,
    cl: f64,
    cr: f64,
    samples: usize,
    tau: (f64, usize),
    tau_pos: (f64, usize),
    tau_neg: (f64, usize),
}

fn mean(acc: (f64, usize)) -> Option<f64> {
    (acc.1 > 0).then(|| acc.0 / acc.1 as f64)
}

/// Trains `params` on the training split of `dataset`.
pub fn train(
    mut params: ModelParams,
    dataset: &NoisyDataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    cfg.validate(dataset.num_classes)?;
    if params.num_classes != dataset.num_classes || params.input_dim != dataset.dim() {
        return Err(Error::Shape(format!(
            "model is {}->{}, data is {}->{}",
            params.input_dim,
            params.num_classes,
            dataset.dim(),
            dataset.num_classes
        )));
    }
    let train_rows = dataset.indices(SplitTag::Train);
    if train_rows.is_empty() {
        return Err(Error::Split("train split is empty".into()));
    }
    let train_mask = crate::noise::NoiseMask {
        flipped: train_rows
            .iter()
            .map(|&i| dataset.mask.flipped[i])
            .collect(),
    };
    let has_val = dataset.split_of.contains(&SplitTag::Val);

    let mut rng = substream(cfg.seed, Stream::Shuffle);
    let mut velocity = params.zeros_like();
    let mut lr = cfg.learning_rate;
    let mut order: Vec<usize> = (0..train_rows.len()).collect();
    let mut last_weights = vec![1.0; train_rows.len()];
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        if cfg.lr_milestones.contains(&epoch) {
            lr *= cfg.lr_decay;
        }
        order.shuffle(&mut rng);
        let regularize = epoch >= cfg.warmup_epochs;
        let mut acc = EpochAccumulator::default();

        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<usize> = batch.iter().map(|&j| train_rows[j]).collect();
            let x = dataset.features.select_rows(&rows);
            let y: Vec<usize> = rows.iter().map(|&i| dataset.observed_labels[i]).collect();
            let logits = model::forward(&params, &x)?;
            let (cl, mut grad) = losses::loss_and_logit_grad(&cfg.base_loss, &logits, &y)?;
            let mut total = cl;
            let mut cr = None;

            match (&cfg.regularizer, regularize) {
                (Regularizer::MultiClass(c), true) => {
                    let out = cmrm::cmrm_loss(&logits, &y, c)?;
                    if c.lambda != 0.0 {
                        add_scaled(&mut grad, &out.logit_grad, c.lambda);
                    }
                    total += c.lambda * out.loss;
                    cr = Some(out.loss);
                    acc.tau.0 += out.threshold.tau;
                    acc.tau.1 += 1;
                    for (&j, &w) in batch.iter().zip(&out.weights) {
                        last_weights[j] = w;
                    }
                }
                (Regularizer::Binary(c), true) => {
                    let p1: Vec<f64> = logits.iter_rows().map(positive_probability).collect();
                    match cmrm::binary_thresholds(&p1, &y, c) {
                        Ok(t) => {
                            let (loss, g) = cmrm::binary_cmrm_loss(&logits, &y, &t, c)?;
                            if c.lambda_pos != 0.0 || c.lambda_neg != 0.0 {
                                add_scaled(&mut grad, &g, 1.0);
                            }
                            total += loss;
                            cr = Some(loss);
                            acc.tau_pos.0 += t.tau_pos;
                            acc.tau_pos.1 += 1;
                            acc.tau_neg.0 += t.tau_neg;
                            acc.tau_neg.1 += 1;
                        }
                        // one class missing from the batch: no CMRM term this step
                        Err(Error::ClassAbsent(_)) => cr = Some(0.0),
                        Err(e) => return Err(e),
                    }
                }
                _ => {}
            }

            let b = batch.len() as f64;
            acc.cl += cl * b;
            acc.total += total * b;
            acc.cr += cr.unwrap_or(0.0) * b;
            acc.samples += batch.len();

            let grads = model::backward(&params, &x, &grad)?;
            sgd_step(
                &mut params,
                &mut velocity,
                &grads,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            );
        }

        let n = acc.samples as f64;
        let active = !matches!(cfg.regularizer, Regularizer::None) && regularize;
        let filter_noise_ratio = match (&cfg.regularizer, regularize) {
            (Regularizer::MultiClass(_), true) => {
                metrics::filtered_noise_ratio(&last_weights, &train_mask)?
            }
            _ => None,
        };
        let (val_acc, val_auroc) = if has_val {
            let (acc_v, auroc_v) = quick_eval(&params, dataset, SplitTag::Val)?;
            (Some(acc_v), auroc_v)
        } else {
            (None, None)
        };
        records.push(EpochRecord {
            epoch: epoch + 1,
            total_loss: acc.total / n,
            cl_loss: acc.cl / n,
            cr_loss: active.then(|| acc.cr / n),
            tau: mean(acc.tau),
            tau_pos: mean(acc.tau_pos),
            tau_neg: mean(acc.tau_neg),
            filter_noise_ratio,
            val_acc,
            val_auroc,
        });
    }
    Ok((params, records))
}

fn add_scaled(into: &mut Matrix, other: &Matrix, scale: f64) {
    for (a, b) in into.as_mut_slice().iter_mut().zip(other.as_slice()) {
        *a += scale * b;
    }
}

fn sgd_step(
    params: &mut ModelParams,
    velocity: &mut ModelParams,
    grads: &ModelParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    // v <- mu v - lr (g + wd theta)
    let mut step = grads.clone();
    step.zip_mut(params, |g, theta| *g += weight_decay * theta);
    velocity.zip_mut(&step, |v, g| *v = momentum * *v - lr * g);
    params.zip_mut(velocity, |theta, v| *theta += v);
}

/// Softmax probabilities for the given rows.
pub fn predict_proba(params: &ModelParams, features: &Matrix) -> Result<Vec<ProbVector>> {
    Ok(model::probabilities(&model::forward(params, features)?))
}

fn split_probs(
    params: &ModelParams,
    dataset: &NoisyDataset,
    tag: SplitTag,
) -> Result<(Vec<ProbVector>, Vec<usize>)> {
    let rows = dataset.indices(tag);
    if rows.is_empty() {
        return Err(Error::Split(format!("{tag:?} split is empty")));
    }
    let probs = predict_proba(params, &dataset.features.select_rows(&rows))?;
    let labels = rows.iter().map(|&i| dataset.clean_labels[i]).collect();
    Ok((probs, labels))
}

fn quick_eval(
    params: &ModelParams,
    dataset: &NoisyDataset,
    tag: SplitTag,
) -> Result<(f64, Option<f64>)> {
    let (probs, labels) = split_probs(params, dataset, tag)?;
    let predicted: Vec<usize> = probs.iter().map(ProbVector::argmax).collect();
    let acc = metrics::accuracy(&predicted, &labels)?;
    let auroc = if dataset.num_classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p.as_slice()[1]).collect();
        metrics::auroc(&scores, &labels).ok()
    } else {
        None
    };
    Ok((acc, auroc))
}

/// Metrics on one split, scored against the clean labels.
///
/// Binary tasks add AUROC, AUPRC and FPR/FNR at 0.5 on the positive-class
/// probability. With `with_conformal`, APS sets are calibrated on the
/// calibration split at `coverage_target`.
pub fn evaluate(
    params: &ModelParams,
    dataset: &NoisyDataset,
    tag: SplitTag,
    with_conformal: bool,
    coverage_target: f64,
) -> Result<MetricReport> {
    let (probs, labels) = split_probs(params, dataset, tag)?;
    let predicted: Vec<usize> = probs.iter().map(ProbVector::argmax).collect();
    let mut report = MetricReport {
        accuracy: metrics::accuracy(&predicted, &labels)?,
        ..Default::default()
    };
    let binary = dataset.num_classes == 2;
    if binary {
        let scores: Vec<f64> = probs.iter().map(|p| p.as_slice()[1]).collect();
        report.auroc = Some(metrics::auroc(&scores, &labels)?);
        report.auprc = Some(metrics::auprc(&scores, &labels)?);
        let (fpr, fnr) = metrics::fpr_fnr(&scores, &labels, 0.5)?;
        report.fpr = Some(fpr);
        report.fnr = Some(fnr);
    }
    if with_conformal {
        let (cal_probs, cal_labels) = split_probs(params, dataset, SplitTag::Cal)?;
        let scores = cal_probs
            .iter()
            .zip(&cal_labels)
            .map(|(p, &y)| conformal::aps_score(p, y))
            .collect::<Result<Vec<f64>>>()?;
        let calib = conformal::calibrate(&scores, coverage_target)?;
        let sets: Vec<PredictionSet> = probs
            .iter()
            .map(|p| conformal::predict_set(p, &calib))
            .collect();
        report.m_apss = Some(conformal::apss(&sets, None)?);
        report.coverage = Some(conformal::coverage(&sets, &labels)?);
        if binary {
            report.pc_apss = conformal::apss(&sets, Some((&labels, 1))).ok();
            report.nc_apss = conformal::apss(&sets, Some((&labels, 0))).ok();
        }
    }
    Ok(report)
}

/// Margins of every training row under its observed label, with the
/// corresponding slice of the noise mask.
pub fn train_margins(
    params: &ModelParams,
    dataset: &NoisyDataset,
) -> Result<(Vec<f64>, crate::noise::NoiseMask)> {
    let rows = dataset.indices(SplitTag::Train);
    let logits = model::forward(params, &dataset.features.select_rows(&rows))?;
    let labels: Vec<usize> = rows.iter().map(|&i| dataset.observed_labels[i]).collect();
    let margins = cmrm::batch_margins(&logits, &labels)?;
    let mask = crate::noise::NoiseMask {
        flipped: rows.iter().map(|&i| dataset.mask.flipped[i]).collect(),
    };
    Ok((margins, mask))
}
