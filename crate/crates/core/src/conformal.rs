//! Split conformal prediction with deterministic APS scores.
//!
//! The APS score of a label is the probability mass of every class ranked at
//! or above it (classes sorted by descending probability, ties by ascending
//! index). No randomization term is used, so sets are slightly conservative.

use serde::{Deserialize, Serialize};

use crate::cmrm::conformal_rank;
use crate::error::{Error, Result};
use crate::model::ProbVector;

pub const DEFAULT_COVERAGE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApsCalibration {
    pub qhat: f64,
    pub coverage_target: f64,
    pub cal_size: usize,
}

/// Labels of one prediction set, in descending-probability order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    pub members: Vec<usize>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.members.contains(&label)
    }
}

fn ranking(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

pub fn aps_score(probs: &ProbVector, true_label: usize) -> Result<f64> {
    let p = probs.as_slice();
    if true_label >= p.len() {
        return Err(Error::Label {
            label: true_label,
            num_classes: p.len(),
        });
    }
    let mut mass = 0.0;
    for c in ranking(p) {
        mass += p[c];
        if c == true_label {
            break;
        }
    }
    Ok(mass)
}

/// `qhat` is the `ceil(target (m + 1))`-th smallest score, capped at `m`.
pub fn calibrate(cal_scores: &[f64], coverage_target: f64) -> Result<ApsCalibration> {
    if cal_scores.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if !(coverage_target > 0.0 && coverage_target < 1.0) {
        return Err(Error::config("eval.coverage_target", "must lie in (0, 1)"));
    }
    let m = cal_scores.len();
    let k = conformal_rank(coverage_target, m);
    let mut sorted = cal_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ApsCalibration {
        qhat: sorted[k - 1],
        coverage_target,
        cal_size: m,
    })
}

/// Adds classes by descending probability until the mass reaches `qhat`.
pub fn predict_set(probs: &ProbVector, calib: &ApsCalibration) -> PredictionSet {
    let p = probs.as_slice();
    let order = ranking(p);
    if calib.qhat >= 1.0 {
        return PredictionSet { members: order };
    }
    let mut members = Vec::new();
    let mut mass = 0.0;
    for c in order {
        members.push(c);
        mass += p[c];
        if mass >= calib.qhat {
            break;
        }
    }
    PredictionSet { members }
}

/// Mean set size, optionally over the examples whose label equals `keep`.
pub fn apss(sets: &[PredictionSet], filter: Option<(&[usize], usize)>) -> Result<f64> {
    let sizes: Vec<usize> = match filter {
        None => sets.iter().map(PredictionSet::len).collect(),
        Some((labels, keep)) => {
            if labels.len() != sets.len() {
                return Err(Error::Metric(format!(
                    "{} labels for {} sets",
                    labels.len(),
                    sets.len()
                )));
            }
            sets.iter()
                .zip(labels)
                .filter(|(_, &y)| y == keep)
                .map(|(s, _)| s.len())
                .collect()
        }
    };
    if sizes.is_empty() {
        return Err(Error::Metric("no prediction sets to average".into()));
    }
    Ok(sizes.iter().sum::<usize>() as f64 / sizes.len() as f64)
}

/// Fraction of sets containing their true label.
pub fn coverage(sets: &[PredictionSet], labels: &[usize]) -> Result<f64> {
    if sets.is_empty() || sets.len() != labels.len() {
        return Err(Error::Metric(
            "coverage needs aligned, nonempty inputs".into(),
        ));
    }
    let hits = sets
        .iter()
        .zip(labels)
        .filter(|(s, &y)| s.contains(y))
        .count();
    Ok(hits as f64 / sets.len() as f64)
}
