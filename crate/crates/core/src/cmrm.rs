//! Conformal margin risk.
//!
//! For a batch with observed labels `y_i` and probabilities `p_i`, the
//! confidence margin is `M_i = p_i[y_i] - max_{j != y_i} p_i[j]`. The batch
//! threshold `tau` is the `k`-th smallest margin with `k = ceil(alpha (s + 1))`
//! capped at `s`, so at most about an `alpha` fraction of the batch lies below
//! it. The risk is
//!
//! ```text
//! L_cr = (1/s) * sum_i -M_i * sigmoid((M_i - tau) / temp)
//! ```
//!
//! Samples far below the threshold get weight near zero and contribute
//! almost nothing; the rest have their margins pushed up.
//!
//! The quantile rule here is the lower-tail order statistic. Read literally,
//! "the ceil(alpha (m + 1))-th largest value" would select an upper-tail value
//! and contradict the stated property that at most an alpha fraction lies
//! below the threshold, so the lower-tail reading is used throughout.
//!
//! Binary tasks use class-conditional thresholds on the positive-class
//! confidence `P1` and a two-sided hinge; see [`binary_thresholds`] and
//! [`binary_cmrm_loss`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{positive_probability, sigmoid, softmax_into, LogitBatch, ProbVector};

/// Rank `ceil(level * (n + 1))` clamped to `1..=n`.
///
/// A tolerance of 1e-9 absorbs representation error such as
/// `0.15 * 20 = 3.0000000000000004`.
pub(crate) fn conformal_rank(level: f64, n: usize) -> usize {
    let raw = (level * (n as f64 + 1.0) - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmrmConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub temp: f64,
    /// Differentiate through the order statistic. Off by default.
    pub grad_through_threshold: bool,
}

impl Default for CmrmConfig {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            lambda: 0.1,
            temp: 1.0,
            grad_through_threshold: false,
        }
    }
}

impl CmrmConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha("cmrm.alpha", self.alpha)?;
        check_lambda("cmrm.lambda", self.lambda)?;
        if !(self.temp.is_finite() && self.temp > 0.0) {
            return Err(Error::config("cmrm.temp", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryCmrmConfig {
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    pub lambda_pos: f64,
    pub lambda_neg: f64,
}

impl BinaryCmrmConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha("cmrm.alpha_pos", self.alpha_pos)?;
        check_alpha("cmrm.alpha_neg", self.alpha_neg)?;
        check_lambda("cmrm.lambda_pos", self.lambda_pos)?;
        check_lambda("cmrm.lambda_neg", self.lambda_neg)
    }
}

fn check_alpha(key: &str, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(key, "must lie in (0, 1)"));
    }
    Ok(())
}

fn check_lambda(key: &str, lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::config(key, "must be >= 0"));
    }
    Ok(())
}

/// An order-statistic threshold taken from a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileThreshold {
    pub tau: f64,
    pub alpha: f64,
    pub sample_size: usize,
    /// 1-based rank of `tau` in the sorted sample.
    pub rank: usize,
    /// Position of the sample element selected as `tau`.
    pub index: usize,
}

/// Margin of `probs` for `observed_label`.
pub fn margin(probs: &ProbVector, observed_label: usize) -> Result<f64> {
    let k = probs.len();
    if observed_label >= k {
        return Err(Error::Label {
            label: observed_label,
            num_classes: k,
        });
    }
    Ok(margin_with_rival(probs.as_slice(), observed_label).0)
}

/// Margin and the lowest-index competing class attaining the max.
pub(crate) fn margin_with_rival(probs: &[f64], y: usize) -> (f64, usize) {
    let mut rival = usize::MAX;
    for (j, &p) in probs.iter().enumerate() {
        if j != y && (rival == usize::MAX || p > probs[rival]) {
            rival = j;
        }
    }
    (probs[y] - probs[rival], rival)
}

/// Batch margins from logits.
pub fn batch_margins(logits: &LogitBatch, labels: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, labels)?;
    let mut probs = vec![0.0; logits.cols()];
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            softmax_into(logits.row(i), &mut probs);
            margin_with_rival(&probs, y).0
        })
        .collect())
}

/// The `ceil(alpha (s + 1))`-th smallest value (capped at `s`).
///
/// Ties are ordered by position, so `index` is deterministic.
pub fn batch_quantile(values: &[f64], alpha: f64) -> Result<QuantileThreshold> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    check_alpha("alpha", alpha)?;
    let rank = conformal_rank(alpha, values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let index = order[rank - 1];
    Ok(QuantileThreshold {
        tau: values[index],
        alpha,
        sample_size: values.len(),
        rank,
        index,
    })
}

/// `sigmoid((x - tau) / temp)`.
pub fn soft_indicator(x: f64, tau: f64, temp: f64) -> Result<f64> {
    if !(temp.is_finite() && temp > 0.0) {
        return Err(Error::config("temp", "must be > 0"));
    }
    Ok(sigmoid((x - tau) / temp))
}

/// Result of evaluating the conformal margin risk on one batch.
#[derive(Debug, Clone)]
pub struct CmrmOutput {
    /// `L_cr`, before scaling by lambda.
    pub loss: f64,
    pub margins: Vec<f64>,
    /// Soft weights in (0, 1).
    pub weights: Vec<f64>,
    pub threshold: QuantileThreshold,
    /// Gradient of `loss` (unscaled by lambda) with respect to the logits.
    pub logit_grad: Matrix,
}

/// Conformal margin risk with the threshold taken from this batch.
pub fn cmrm_loss(logits: &LogitBatch, labels: &[usize], cfg: &CmrmConfig) -> Result<CmrmOutput> {
    cfg.validate()?;
    let margins = batch_margins(logits, labels)?;
    let threshold = batch_quantile(&margins, cfg.alpha)?;
    evaluate(logits, labels, cfg, threshold, margins)
}

/// Conformal margin risk against a fixed threshold `tau`.
///
/// The threshold is a constant here, so the gradient never flows through it
/// regardless of `grad_through_threshold`.
pub fn cmrm_loss_at_threshold(
    logits: &LogitBatch,
    labels: &[usize],
    cfg: &CmrmConfig,
    tau: f64,
) -> Result<CmrmOutput> {
    cfg.validate()?;
    let margins = batch_margins(logits, labels)?;
    if margins.is_empty() {
        return Err(Error::EmptySample);
    }
    let threshold = QuantileThreshold {
        tau,
        alpha: cfg.alpha,
        sample_size: margins.len(),
        rank: 0,
        index: usize::MAX,
    };
    let detached = CmrmConfig {
        grad_through_threshold: false,
        ..*cfg
    };
    evaluate(logits, labels, &detached, threshold, margins)
}

fn evaluate(
    logits: &LogitBatch,
    labels: &[usize],
    cfg: &CmrmConfig,
    threshold: QuantileThreshold,
    margins: Vec<f64>,
) -> Result<CmrmOutput> {
    let s = margins.len();
    let k = logits.cols();
    let inv_s = 1.0 / s as f64;
    let tau = threshold.tau;

    let weights: Vec<f64> = margins
        .iter()
        .map(|&m| sigmoid((m - tau) / cfg.temp))
        .collect();
    let loss = -margins
        .iter()
        .zip(&weights)
        .map(|(m, w)| m * w)
        .sum::<f64>()
        * inv_s;

    // d/dM_i of -(1/s) M_i w_i, with w_i = sigmoid((M_i - tau)/temp)
    let mut d_margin: Vec<f64> = margins
        .iter()
        .zip(&weights)
        .map(|(&m, &w)| -(w + m * w * (1.0 - w) / cfg.temp) * inv_s)
        .collect();
    if cfg.grad_through_threshold {
        let d_tau: f64 = margins
            .iter()
            .zip(&weights)
            .map(|(&m, &w)| m * w * (1.0 - w) / cfg.temp)
            .sum::<f64>()
            * inv_s;
        d_margin[threshold.index] += d_tau;
    }

    let mut logit_grad = Matrix::zeros(s, k);
    let mut probs = vec![0.0; k];
    for (i, &y) in labels.iter().enumerate() {
        softmax_into(logits.row(i), &mut probs);
        let (_, rival) = margin_with_rival(&probs, y);
        let (py, pc) = (probs[y], probs[rival]);
        let dm = d_margin[i];
        // dM/dz_j = p_y (delta_yj - p_j) - p_c (delta_cj - p_j)
        for (j, g) in logit_grad.row_mut(i).iter_mut().enumerate() {
            let mut dz = (pc - py) * probs[j];
            if j == y {
                dz += py;
            }
            if j == rival {
                dz -= pc;
            }
            *g = dm * dz;
        }
    }

    Ok(CmrmOutput {
        loss,
        margins,
        weights,
        threshold,
        logit_grad,
    })
}

fn check_labels(logits: &LogitBatch, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if logits.cols() < 2 {
        return Err(Error::Shape("margins need K >= 2".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Label {
            label: bad,
            num_classes: logits.cols(),
        });
    }
    Ok(())
}

/// Class-conditional thresholds on the positive-class confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryThresholds {
    /// Lower-tail threshold of observed positives.
    pub tau_pos: f64,
    /// Upper-tail threshold of observed negatives.
    pub tau_neg: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl BinaryThresholds {
    /// `tau_neg - tau_pos`.
    pub fn gap(&self) -> f64 {
        self.tau_neg - self.tau_pos
    }
}

/// Computes `tau_neg` and `tau_pos` for one batch.
///
/// Candidates are the observed confidences of each class. `tau_neg` is the
/// smallest negative confidence `t` with `#{neg: P1 >= t} <= ceil(alpha_neg (n0 + 1))`;
/// `tau_pos` is the largest positive confidence `t` with
/// `#{pos: P1 <= t} <= ceil(alpha_pos (n1 + 1))`. Ties at the extreme that
/// exceed the budget fall back to the class maximum (negatives) or minimum
/// (positives).
pub fn binary_thresholds(
    pos_confidences: &[f64],
    observed_labels: &[usize],
    cfg: &BinaryCmrmConfig,
) -> Result<BinaryThresholds> {
    cfg.validate()?;
    if pos_confidences.len() != observed_labels.len() {
        return Err(Error::Shape(format!(
            "{} confidences for {} labels",
            pos_confidences.len(),
            observed_labels.len()
        )));
    }
    let mut neg = Vec::new();
    let mut pos = Vec::new();
    for (&p, &y) in pos_confidences.iter().zip(observed_labels) {
        match y {
            0 => neg.push(p),
            1 => pos.push(p),
            other => {
                return Err(Error::Label {
                    label: other,
                    num_classes: 2,
                })
            }
        }
    }
    if neg.is_empty() {
        return Err(Error::ClassAbsent(0));
    }
    if pos.is_empty() {
        return Err(Error::ClassAbsent(1));
    }
    neg.sort_by(f64::total_cmp);
    pos.sort_by(f64::total_cmp);

    let budget_neg = budget(cfg.alpha_neg, neg.len());
    let mut tau_neg = *neg.last().expect("nonempty");
    for (lt, &t) in neg.iter().enumerate() {
        if lt > 0 && neg[lt - 1] == t {
            continue;
        }
        // `lt` values are strictly below t
        if neg.len() - lt <= budget_neg {
            tau_neg = t;
            break;
        }
    }

    let budget_pos = budget(cfg.alpha_pos, pos.len());
    let mut tau_pos = pos[0];
    for (idx, &t) in pos.iter().enumerate().rev() {
        if idx + 1 < pos.len() && pos[idx + 1] == t {
            continue;
        }
        // idx + 1 values are <= t
        if idx < budget_pos {
            tau_pos = t;
            break;
        }
    }

    Ok(BinaryThresholds {
        tau_pos,
        tau_neg,
        n_pos: pos.len(),
        n_neg: neg.len(),
    })
}

fn budget(alpha: f64, n: usize) -> usize {
    (alpha * (n as f64 + 1.0) - 1e-9).ceil().max(0.0) as usize
}

/// Two-sided hinge relative to the class thresholds, with the lambdas
/// embedded:
///
/// ```text
/// (1/n) sum_i [ -l_neg 1[y=0] (P1 - tau_neg)^+ - l_pos 1[y=1] (tau_pos - P1)^+ ]
/// ```
///
/// Thresholds are constants for differentiation; the hinge slope at its kink
/// is zero.
pub fn binary_cmrm_loss(
    logits: &LogitBatch,
    observed_labels: &[usize],
    thresholds: &BinaryThresholds,
    cfg: &BinaryCmrmConfig,
) -> Result<(f64, Matrix)> {
    if logits.cols() != 2 {
        return Err(Error::config(
            "cmrm.kind",
            "binary CMRM requires exactly 2 classes",
        ));
    }
    check_labels(logits, observed_labels)?;
    let n = logits.rows();
    if n == 0 {
        return Err(Error::EmptySample);
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, 2);
    let mut total = 0.0;
    for (i, &y) in observed_labels.iter().enumerate() {
        let p1 = positive_probability(logits.row(i));
        let d_p1 = if y == 0 {
            let excess = p1 - thresholds.tau_neg;
            if excess > 0.0 {
                total -= cfg.lambda_neg * excess;
                -cfg.lambda_neg
            } else {
                0.0
            }
        } else {
            let shortfall = thresholds.tau_pos - p1;
            if shortfall > 0.0 {
                total -= cfg.lambda_pos * shortfall;
                cfg.lambda_pos
            } else {
                0.0
            }
        };
        if d_p1 != 0.0 {
            let slope = d_p1 * p1 * (1.0 - p1) * inv_n;
            let g = grad.row_mut(i);
            g[1] = slope;
            g[0] = -slope;
        }
    }
    Ok((total * inv_n, grad))
}
