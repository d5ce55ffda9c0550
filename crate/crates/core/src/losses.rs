//! Base classification losses with exact logit gradients.
//!
//! Every loss is averaged over the batch and its gradient is the derivative
//! of that mean, so row `i` of the gradient carries a `1/s` factor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{log_softmax_into, softmax_into, LogitBatch};

/// Floor applied to `p_y` before taking its log.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;
pub const DEFAULT_GCE_Q: f64 = 0.7;
pub const DEFAULT_LDAM_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseLossSpec {
    /// Cross-entropy.
    Ce,
    /// `-(1 - p_y)^gamma log p_y`.
    Focal { gamma: f64 },
    /// Generalized cross-entropy `(1 - p_y^q) / q`.
    Gce { q: f64 },
    /// Cross-entropy after subtracting `margin_scale / n_y^(1/4)` from the
    /// observed-class logit.
    Ldam {
        margin_scale: f64,
        class_counts: Vec<usize>,
    },
    /// `max(0, 1 - a u)` on the binary decision score `u = z1 - z0`, with
    /// `a = +1` for label 1 and `-1` for label 0.
    Hinge,
}

impl BaseLossSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self {
            BaseLossSpec::Ce => Ok(()),
            BaseLossSpec::Focal { gamma } => {
                if !(gamma.is_finite() && *gamma >= 0.0) {
                    return Err(Error::config("train.focal_gamma", "must be >= 0"));
                }
                Ok(())
            }
            BaseLossSpec::Gce { q } => {
                if !(*q > 0.0 && *q <= 1.0) {
                    return Err(Error::config("train.gce_q", "must lie in (0, 1]"));
                }
                Ok(())
            }
            BaseLossSpec::Ldam {
                margin_scale,
                class_counts,
            } => {
                if !(margin_scale.is_finite() && *margin_scale >= 0.0) {
                    return Err(Error::config("train.ldam_scale", "must be >= 0"));
                }
                if class_counts.len() != num_classes || class_counts.contains(&0) {
                    return Err(Error::config(
                        "train.ldam_class_counts",
                        "need one count >= 1 per class",
                    ));
                }
                Ok(())
            }
            BaseLossSpec::Hinge => {
                if num_classes != 2 {
                    return Err(Error::config(
                        "train.base_loss",
                        "hinge loss requires exactly 2 classes",
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BaseLossSpec::Ce => "ce",
            BaseLossSpec::Focal { .. } => "focal",
            BaseLossSpec::Gce { .. } => "gce",
            BaseLossSpec::Ldam { .. } => "ldam",
            BaseLossSpec::Hinge => "hinge",
        }
    }
}

/// Mean loss over the batch and its gradient with respect to the logits.
pub fn loss_and_logit_grad(
    spec: &BaseLossSpec,
    logits: &LogitBatch,
    labels: &[usize],
) -> Result<(f64, Matrix)> {
    let k = logits.cols();
    let s = logits.rows();
    if labels.len() != s {
        return Err(Error::Shape(format!(
            "{} labels for {s} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Label {
            label: bad,
            num_classes: k,
        });
    }
    spec.validate(k)?;
    if s == 0 {
        return Ok((0.0, Matrix::zeros(0, k)));
    }

    let inv_s = 1.0 / s as f64;
    let mut grad = Matrix::zeros(s, k);
    let mut total = 0.0;
    let mut probs = vec![0.0; k];
    let mut logp = vec![0.0; k];
    let mut shifted = vec![0.0; k];

    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        let g = grad.row_mut(i);
        let loss = match spec {
            BaseLossSpec::Ce => {
                softmax_into(z, &mut probs);
                log_softmax_into(z, &mut logp);
                cross_entropy_row(&probs, logp[y], y, g)
            }
            BaseLossSpec::Ldam {
                margin_scale,
                class_counts,
            } => {
                shifted.copy_from_slice(z);
                shifted[y] -= margin_scale / (class_counts[y] as f64).powf(0.25);
                softmax_into(&shifted, &mut probs);
                log_softmax_into(&shifted, &mut logp);
                cross_entropy_row(&probs, logp[y], y, g)
            }
            BaseLossSpec::Focal { gamma } => {
                softmax_into(z, &mut probs);
                log_softmax_into(z, &mut logp);
                focal_row(&probs, logp[y], y, *gamma, g)
            }
            BaseLossSpec::Gce { q } => {
                softmax_into(z, &mut probs);
                let p = probs[y];
                let pq = p.powf(*q);
                // dL/dz_j = -p^q (delta_yj - p_j)
                for (j, gj) in g.iter_mut().enumerate() {
                    let delta = if j == y { 1.0 } else { 0.0 };
                    *gj = -pq * (delta - probs[j]);
                }
                (1.0 - pq) / q
            }
            BaseLossSpec::Hinge => {
                let a = if y == 1 { 1.0 } else { -1.0 };
                let slack = 1.0 - a * (z[1] - z[0]);
                if slack > 0.0 {
                    g[1] = -a;
                    g[0] = a;
                    slack
                } else {
                    0.0
                }
            }
        };
        total += loss;
        for v in g.iter_mut() {
            *v *= inv_s;
        }
    }
    Ok((total * inv_s, grad))
}

fn cross_entropy_row(probs: &[f64], log_py: f64, y: usize, g: &mut [f64]) -> f64 {
    if log_py < PROB_FLOOR.ln() {
        // Clamped region: the loss is constant there.
        g.iter_mut().for_each(|v| *v = 0.0);
        return -PROB_FLOOR.ln();
    }
    for (j, gj) in g.iter_mut().enumerate() {
        *gj = probs[j] - if j == y { 1.0 } else { 0.0 };
    }
    -log_py
}

fn focal_row(probs: &[f64], log_py: f64, y: usize, gamma: f64, g: &mut [f64]) -> f64 {
    let log_py = log_py.max(PROB_FLOOR.ln());
    let p = probs[y];
    let one_minus = 1.0 - p;
    let focus = one_minus.powf(gamma);
    // dL/dp = gamma (1-p)^(gamma-1) log p - (1-p)^gamma / p, and
    // dp/dz_j = p (delta_yj - p_j); the product is written to avoid 1/p.
    let extra = if gamma == 0.0 || one_minus <= 0.0 {
        0.0
    } else {
        gamma * one_minus.powf(gamma - 1.0) * p * log_py
    };
    let coef = extra - focus;
    for (j, gj) in g.iter_mut().enumerate() {
        let delta = if j == y { 1.0 } else { 0.0 };
        *gj = coef * (delta - probs[j]);
    }
    -focus * log_py
}
