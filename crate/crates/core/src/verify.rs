//! Independent oracles and Monte Carlo checks.
//!
//! These routines deliberately avoid sharing code paths with the functions
//! they check: the brute-force loss uses explicit loops and a counting
//! quantile, and gradients are compared against central differences.

use rand::Rng as _;
use rand_distr::{Distribution as _, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF, Normal};

use crate::cmrm::{self, BinaryCmrmConfig, BinaryThresholds, CmrmConfig};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{self, BaseLossSpec};
use crate::metrics;
use crate::model::{self, positive_probability, Architecture, ModelParams};
use crate::rng::{indexed, Rng, Stream};

/// Accepted band for the fitted decay exponent of the median quantile error.
pub const EXPONENT_BAND: (f64, f64) = (-0.65, -0.35);
/// Finite-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-4;
/// Maximum accepted relative gradient error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
/// Largest batch accepted by [`bruteforce_cmrm`].
pub const BRUTEFORCE_MAX_BATCH: usize = 64;

/// Reference distributions with closed-form CDF and quantile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Uniform01,
    StdNormal,
    Beta {
        a: f64,
        b: f64,
    },
    /// All mass at one value.
    PointMass {
        value: f64,
    },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Distribution::Beta { a, b }
                if !(a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0) =>
            {
                Err(Error::config(
                    "verify.distribution",
                    "beta shape parameters must be > 0",
                ))
            }
            Distribution::PointMass { value } if !value.is_finite() => Err(Error::config(
                "verify.distribution",
                "point mass must be finite",
            )),
            _ => Ok(()),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            Distribution::Uniform01 => rng.random::<f64>(),
            Distribution::StdNormal => StandardNormal.sample(rng),
            Distribution::Beta { a, b } => rand_distr::Beta::new(a, b)
                .expect("validated shape parameters")
                .sample(rng),
            Distribution::PointMass { value } => value,
        }
    }

    /// `G(x) = P(X <= x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Distribution::Uniform01 => x.clamp(0.0, 1.0),
            Distribution::StdNormal => std_normal().cdf(x),
            Distribution::Beta { a, b } => beta(a, b).cdf(x.clamp(0.0, 1.0)),
            Distribution::PointMass { value } => f64::from(u8::from(x >= value)),
        }
    }

    /// `G(x-) = P(X < x)`.
    pub fn cdf_left(&self, x: f64) -> f64 {
        match *self {
            Distribution::PointMass { value } => f64::from(u8::from(x > value)),
            _ => self.cdf(x),
        }
    }

    /// Population `p`-quantile `inf {x : G(x) >= p}`.
    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            Distribution::Uniform01 => p,
            Distribution::StdNormal => std_normal().inverse_cdf(p),
            Distribution::Beta { a, b } => beta(a, b).inverse_cdf(p),
            Distribution::PointMass { value } => value,
        }
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn beta(a: f64, b: f64) -> Beta {
    Beta::new(a, b).expect("validated shape parameters")
}

/// Batch-quantile error statistics across batch sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub distribution: Distribution,
    pub alpha: f64,
    pub trials: usize,
    pub population_tau: f64,
    pub batch_sizes: Vec<usize>,
    pub median_error: Vec<f64>,
    pub p95_error: Vec<f64>,
    /// Least-squares slope of `ln(median_error)` against `ln(s)`.
    pub decay_exponent: f64,
}

impl ConcentrationReport {
    pub fn median_strictly_decreasing(&self) -> bool {
        self.median_error.windows(2).all(|w| w[1] < w[0])
    }

    pub fn exponent_in_band(&self) -> bool {
        (EXPONENT_BAND.0..=EXPONENT_BAND.1).contains(&self.decay_exponent)
    }

    pub fn passes(&self) -> bool {
        self.median_strictly_decreasing() && self.exponent_in_band()
    }

    /// Plot-ready rows `batch_size, median_error, p95_error`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(["batch_size", "median_error", "p95_error"])?;
        for ((s, m), p) in self
            .batch_sizes
            .iter()
            .zip(&self.median_error)
            .zip(&self.p95_error)
        {
            w.write_record([s.to_string(), m.to_string(), p.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

fn check_sizes(sizes: &[usize], trials: usize) -> Result<()> {
    if trials < 100 {
        return Err(Error::config("verify.trials", "must be >= 100"));
    }
    if sizes.is_empty() || sizes.iter().any(|&s| s < 8) {
        return Err(Error::config(
            "verify.batch_sizes",
            "need at least one size, each >= 8",
        ));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(
            "verify.batch_sizes",
            "must be strictly increasing",
        ));
    }
    Ok(())
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Nearest-rank percentile of a sorted sample.
fn percentile_sorted(v: &[f64], p: f64) -> f64 {
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Least-squares slope of `y` on `x`.
fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Draws `trials` batches per size and measures `|tau_hat - tau|`.
///
/// Trial `t` at size index `j` uses its own stream indexed by
/// `j * trials + t`, so results do not depend on scheduling.
pub fn quantile_concentration(
    distribution: Distribution,
    alpha: f64,
    batch_sizes: &[usize],
    trials: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    distribution.validate()?;
    check_sizes(batch_sizes, trials)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config("verify.alpha", "must lie in (0, 1)"));
    }
    let tau = distribution.quantile(alpha);
    let mut median_error = Vec::with_capacity(batch_sizes.len());
    let mut p95_error = Vec::with_capacity(batch_sizes.len());
    for (j, &s) in batch_sizes.iter().enumerate() {
        let mut errors = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = indexed(seed, Stream::Verify, (j * trials + t) as u64);
                let batch: Vec<f64> = (0..s).map(|_| distribution.sample(&mut rng)).collect();
                cmrm::batch_quantile(&batch, alpha).map(|q| (q.tau - tau).abs())
            })
            .collect::<Result<Vec<f64>>>()?;
        errors.sort_by(f64::total_cmp);
        median_error.push(median_sorted(&errors));
        p95_error.push(percentile_sorted(&errors, 0.95));
    }
    if median_error.iter().any(|&m| m <= 0.0) {
        return Err(Error::Degenerate(
            "zero median error; decay exponent undefined".into(),
        ));
    }
    let xs: Vec<f64> = batch_sizes.iter().map(|&s| (s as f64).ln()).collect();
    let ys: Vec<f64> = median_error.iter().map(|m| m.ln()).collect();
    let decay_exponent = if xs.len() > 1 {
        ls_slope(&xs, &ys)
    } else {
        f64::NAN
    };
    Ok(ConcentrationReport {
        distribution,
        alpha,
        trials,
        population_tau: tau,
        batch_sizes: batch_sizes.to_vec(),
        median_error,
        p95_error,
        decay_exponent,
    })
}

/// Exact `sup_t |G_hat(t) - G(t)|` for a sample, including atoms in `G`.
pub fn sup_gap(sample: &[f64], distribution: &Distribution) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut gap: f64 = 0.0;
    let mut below = 0usize;
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j] == v[i] {
            j += 1;
        }
        // left of the value: G_hat = below / n; at it: G_hat = j / n
        gap = gap.max((below as f64 / n - distribution.cdf_left(v[i])).abs());
        gap = gap.max((j as f64 / n - distribution.cdf(v[i])).abs());
        below = j;
        i = j;
    }
    gap
}

/// DKW radius `sqrt(ln(2 / delta) / (2 s))`.
pub fn dkw_radius(s: usize, delta: f64) -> f64 {
    ((2.0 / delta).ln() / (2.0 * s as f64)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DkwReport {
    pub distribution: Distribution,
    pub delta: f64,
    pub trials: usize,
    pub sample_sizes: Vec<usize>,
    pub radius: Vec<f64>,
    /// Fraction of trials whose sup-gap exceeds the radius.
    pub exceedance: Vec<f64>,
    /// `delta + 3 sqrt(delta (1 - delta) / trials)`.
    pub tolerance: f64,
    pub median_sup_gap: Vec<f64>,
}

impl DkwReport {
    pub fn passes(&self) -> bool {
        self.exceedance.iter().all(|&e| e <= self.tolerance)
    }
}

pub fn dkw_check(
    distribution: Distribution,
    sample_sizes: &[usize],
    trials: usize,
    delta: f64,
    seed: u64,
) -> Result<DkwReport> {
    distribution.validate()?;
    check_sizes(sample_sizes, trials)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::config("verify.delta", "must lie in (0, 1)"));
    }
    let mut radius = Vec::new();
    let mut exceedance = Vec::new();
    let mut median_sup_gap = Vec::new();
    for (j, &s) in sample_sizes.iter().enumerate() {
        let r = dkw_radius(s, delta);
        let mut gaps: Vec<f64> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = indexed(seed, Stream::Verify, (j * trials + t) as u64);
                let sample: Vec<f64> = (0..s).map(|_| distribution.sample(&mut rng)).collect();
                sup_gap(&sample, &distribution)
            })
            .collect();
        let over = gaps.iter().filter(|&&g| g > r).count();
        gaps.sort_by(f64::total_cmp);
        radius.push(r);
        exceedance.push(over as f64 / trials as f64);
        median_sup_gap.push(median_sorted(&gaps));
    }
    Ok(DkwReport {
        distribution,
        delta,
        trials,
        sample_sizes: sample_sizes.to_vec(),
        radius,
        exceedance,
        tolerance: delta + 3.0 * (delta * (1.0 - delta) / trials as f64).sqrt(),
        median_sup_gap,
    })
}

/// `|hard - soft|` CMRM loss on fixed margins for each temperature.
///
/// The hard loss uses the indicator `1[m >= tau]`.
pub fn temp_gap(margins: &[f64], tau: f64, temps: &[f64]) -> Result<Vec<f64>> {
    if margins.is_empty() {
        return Err(Error::EmptySample);
    }
    if temps.iter().any(|t| !(t.is_finite() && *t > 0.0)) || temps.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::config(
            "verify.temps",
            "must be positive and strictly decreasing",
        ));
    }
    let n = margins.len() as f64;
    let hard: f64 = margins
        .iter()
        .filter(|&&m| m >= tau)
        .map(|m| -m)
        .sum::<f64>()
        / n;
    temps
        .iter()
        .map(|&t| {
            let soft = margins
                .iter()
                .map(|&m| cmrm::soft_indicator(m, tau, t).map(|w| -m * w))
                .sum::<Result<f64>>()?
                / n;
            Ok((hard - soft).abs())
        })
        .collect()
}

/// Straightforward recomputation of the CMRM loss.
///
/// Softmax, margins and the loss are written as plain loops and the quantile
/// is found by counting rather than sorting. Quadratic in the batch size.
pub fn bruteforce_cmrm(logits: &Matrix, labels: &[usize], cfg: &CmrmConfig) -> Result<f64> {
    cfg.validate()?;
    let s = logits.rows();
    let k = logits.cols();
    if s == 0 {
        return Err(Error::EmptySample);
    }
    if s > BRUTEFORCE_MAX_BATCH || labels.len() != s {
        return Err(Error::Shape(format!(
            "oracle batch must have 1..={BRUTEFORCE_MAX_BATCH} rows with one label each"
        )));
    }
    let mut margins = vec![0.0; s];
    for i in 0..s {
        let y = labels[i];
        if y >= k {
            return Err(Error::Label {
                label: y,
                num_classes: k,
            });
        }
        let mut top = logits.get(i, 0);
        for j in 1..k {
            if logits.get(i, j) > top {
                top = logits.get(i, j);
            }
        }
        let mut z = 0.0;
        for j in 0..k {
            z += (logits.get(i, j) - top).exp();
        }
        let mut rival = f64::NEG_INFINITY;
        for j in 0..k {
            if j != y {
                let p = (logits.get(i, j) - top).exp() / z;
                if p > rival {
                    rival = p;
                }
            }
        }
        margins[i] = (logits.get(i, y) - top).exp() / z - rival;
    }

    // k-th smallest, k = ceil(alpha (s + 1)) capped at s
    let mut rank = 1usize;
    while (rank as f64) < cfg.alpha * (s as f64 + 1.0) - 1e-9 && rank < s {
        rank += 1;
    }
    let mut tau = f64::NAN;
    for i in 0..s {
        let mut less = 0;
        let mut less_eq = 0;
        for j in 0..s {
            if margins[j] < margins[i] {
                less += 1;
            }
            if margins[j] <= margins[i] {
                less_eq += 1;
            }
        }
        if less < rank && rank <= less_eq {
            tau = margins[i];
            break;
        }
    }

    let mut total = 0.0;
    for &m in &margins {
        total += -m / (1.0 + (-(m - tau) / cfg.temp).exp());
    }
    Ok(total / s as f64)
}

/// An objective whose parameter gradient can be checked.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Base(BaseLossSpec),
    /// `base + lambda * L_cr` with the threshold detached.
    WithCmrm(BaseLossSpec, CmrmConfig),
    /// `base + L_binary` with both thresholds detached.
    WithBinaryCmrm(BaseLossSpec, BinaryCmrmConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub num_params: usize,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.max_relative_error <= GRAD_CHECK_TOLERANCE
    }
}

enum FrozenThreshold {
    None,
    Multi(f64),
    Binary(BinaryThresholds),
}

fn objective_value(
    params: &ModelParams,
    features: &Matrix,
    labels: &[usize],
    objective: &Objective,
    frozen: &FrozenThreshold,
) -> Result<(f64, Matrix)> {
    let logits = model::forward(params, features)?;
    let base = match objective {
        Objective::Base(b) | Objective::WithCmrm(b, _) | Objective::WithBinaryCmrm(b, _) => b,
    };
    let (mut loss, mut grad) = losses::loss_and_logit_grad(base, &logits, labels)?;
    match (objective, frozen) {
        (Objective::WithCmrm(_, c), FrozenThreshold::Multi(tau)) => {
            let out = cmrm::cmrm_loss_at_threshold(&logits, labels, c, *tau)?;
            loss += c.lambda * out.loss;
            for (g, r) in grad
                .as_mut_slice()
                .iter_mut()
                .zip(out.logit_grad.as_slice())
            {
                *g += c.lambda * r;
            }
        }
        (Objective::WithBinaryCmrm(_, c), FrozenThreshold::Binary(t)) => {
            let (l, g2) = cmrm::binary_cmrm_loss(&logits, labels, t, c)?;
            loss += l;
            for (g, r) in grad.as_mut_slice().iter_mut().zip(g2.as_slice()) {
                *g += r;
            }
        }
        _ => {}
    }
    Ok((loss, grad))
}

/// Moves each binary threshold half-way towards the next observed confidence
/// of its class on the side where the hinge is flat, so no sample sits on a
/// kink.
fn off_kink(t: BinaryThresholds, p1: &[f64], labels: &[usize]) -> BinaryThresholds {
    let above_neg = p1
        .iter()
        .zip(labels)
        .filter(|&(&p, &y)| y == 0 && p > t.tau_neg)
        .map(|(&p, _)| p)
        .fold(1.0, f64::min);
    let below_pos = p1
        .iter()
        .zip(labels)
        .filter(|&(&p, &y)| y == 1 && p < t.tau_pos)
        .map(|(&p, _)| p)
        .fold(0.0, f64::max);
    BinaryThresholds {
        tau_neg: 0.5 * (t.tau_neg + above_neg),
        tau_pos: 0.5 * (t.tau_pos + below_pos),
        ..t
    }
}

/// Max relative error between backpropagated and central-difference
/// gradients of the mean objective, with denominator `max(|a|, |b|, 1e-8)`.
///
/// CMRM thresholds are computed once at `params` and held fixed. Binary
/// thresholds are additionally moved off the hinge kinks.
pub fn grad_check(
    params: &ModelParams,
    features: &Matrix,
    labels: &[usize],
    objective: &Objective,
    step: f64,
) -> Result<GradCheckReport> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::config("verify.step", "must be > 0"));
    }
    let logits = model::forward(params, features)?;
    let frozen = match objective {
        Objective::Base(_) => FrozenThreshold::None,
        Objective::WithCmrm(_, c) => {
            let margins = cmrm::batch_margins(&logits, labels)?;
            FrozenThreshold::Multi(cmrm::batch_quantile(&margins, c.alpha)?.tau)
        }
        Objective::WithBinaryCmrm(_, c) => {
            let p1: Vec<f64> = logits.iter_rows().map(positive_probability).collect();
            let t = cmrm::binary_thresholds(&p1, labels, c)?;
            FrozenThreshold::Binary(off_kink(t, &p1, labels))
        }
    };
    let (_, logit_grad) = objective_value(params, features, labels, objective, &frozen)?;
    let analytic = model::backward(params, features, &logit_grad)?.flatten();

    let base = params.flatten();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut theta = base.clone();
        theta[i] = base[i] + step;
        probe.set_flat(&theta)?;
        let plus = objective_value(&probe, features, labels, objective, &frozen)?.0;
        theta[i] = base[i] - step;
        probe.set_flat(&theta)?;
        let minus = objective_value(&probe, features, labels, objective, &frozen)?.0;
        let numeric = (plus - minus) / (2.0 * step);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(GradCheckReport {
        num_params: analytic.len(),
        max_relative_error: worst,
    })
}

/// Full-sample conformal threshold and the KDE density of the margins there.
pub fn density_at_threshold(margins: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if margins.len() < 50 {
        return Err(Error::Metric(
            "density check needs at least 50 margins".into(),
        ));
    }
    let tau = cmrm::batch_quantile(margins, alpha)?.tau;
    let h = metrics::silverman_bandwidth(margins)?;
    Ok((tau, metrics::kde(margins, h, tau)))
}

/// One objective checked on one random instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub instance: usize,
    pub objective: String,
    pub architecture: String,
    pub max_relative_error: f64,
}

fn objective_name(o: &Objective) -> String {
    match o {
        Objective::Base(b) => b.name().to_string(),
        Objective::WithCmrm(b, _) => format!("{}+cmrm", b.name()),
        Objective::WithBinaryCmrm(b, _) => format!("{}+binary_cmrm", b.name()),
    }
}

/// Distance of the instance from the nearest non-differentiable point:
/// ReLU pre-activations, the hinge corner and margin rival ties.
fn kink_distance(
    params: &ModelParams,
    x: &Matrix,
    labels: &[usize],
    objective: &Objective,
) -> Result<f64> {
    let mut dist = f64::INFINITY;
    if params.layers.len() == 2 {
        let l = &params.layers[0];
        let pre = x.matmul_transpose(&l.weights);
        for i in 0..pre.rows() {
            for (j, &b) in l.bias.iter().enumerate() {
                dist = dist.min((pre.get(i, j) + b).abs());
            }
        }
    }
    let logits = model::forward(params, x)?;
    for (row, &y) in logits.iter_rows().zip(labels) {
        if logits.cols() == 2 {
            let u = row[1] - row[0];
            let signed = if y == 1 { u } else { -u };
            dist = dist.min((1.0 - signed).abs());
        }
        let mut others: Vec<f64> = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &z)| z)
            .collect();
        others.sort_by(|a, b| b.total_cmp(a));
        if others.len() > 1 {
            dist = dist.min(others[0] - others[1]);
        }
    }
    if let Objective::WithBinaryCmrm(..) = objective {
        let p1: Vec<f64> = logits.iter_rows().map(positive_probability).collect();
        for i in 0..p1.len() {
            for j in 0..i {
                if labels[i] == labels[j] {
                    dist = dist.min((p1[i] - p1[j]).abs());
                }
            }
        }
    }
    Ok(dist)
}

/// Gradient checks for every objective on `instances` random small models
/// (d, K, hidden <= 8, batch <= 8). Instances within 1e-3 of a kink are
/// redrawn.
pub fn gradcheck_suite(seed: u64, instances: usize) -> Result<Vec<GradCheckCase>> {
    let mut cases = Vec::new();
    for inst in 0..instances {
        let mut rng = indexed(seed, Stream::Verify, inst as u64);
        let arch = if inst % 2 == 0 {
            Architecture::Linear
        } else {
            Architecture::TwoLayerMlp {
                hidden: rng.random_range(1..=8),
            }
        };
        let multi_k = rng.random_range(2..=8);
        let lambda = rng.random_range(0.05..1.0);
        let alpha = rng.random_range(0.05..0.5);
        let counts: Vec<usize> = (0..multi_k).map(|_| rng.random_range(1..200)).collect();
        let binary = BinaryCmrmConfig {
            alpha_pos: rng.random_range(0.05..0.5),
            alpha_neg: rng.random_range(0.05..0.5),
            lambda_pos: rng.random_range(0.05..1.0),
            lambda_neg: rng.random_range(0.05..1.0),
        };
        let objectives = [
            (multi_k, Objective::Base(BaseLossSpec::Ce)),
            (multi_k, Objective::Base(BaseLossSpec::Focal { gamma: 2.0 })),
            (multi_k, Objective::Base(BaseLossSpec::Gce { q: 0.7 })),
            (
                multi_k,
                Objective::Base(BaseLossSpec::Ldam {
                    margin_scale: 0.5,
                    class_counts: counts,
                }),
            ),
            (2, Objective::Base(BaseLossSpec::Hinge)),
            (
                multi_k,
                Objective::WithCmrm(
                    BaseLossSpec::Ce,
                    CmrmConfig {
                        alpha,
                        lambda,
                        ..Default::default()
                    },
                ),
            ),
            (2, Objective::WithBinaryCmrm(BaseLossSpec::Ce, binary)),
            (2, Objective::WithBinaryCmrm(BaseLossSpec::Hinge, binary)),
        ];
        for (k, objective) in objectives {
            let d = rng.random_range(1..=8);
            let s = rng.random_range(2..=8);
            let (params, x, labels) = loop {
                let params = ModelParams::init(arch, d, k, &mut rng)?;
                let x = Matrix::new(
                    s,
                    d,
                    (0..s * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                )?;
                let mut labels: Vec<usize> = (0..s).map(|_| rng.random_range(0..k)).collect();
                labels[0] = 0;
                labels[1] = 1;
                if kink_distance(&params, &x, &labels, &objective)? > 1e-3 {
                    break (params, x, labels);
                }
            };
            let report = grad_check(&params, &x, &labels, &objective, GRAD_CHECK_STEP)?;
            cases.push(GradCheckCase {
                instance: inst,
                objective: objective_name(&objective),
                architecture: match arch {
                    Architecture::Linear => "linear".into(),
                    Architecture::TwoLayerMlp { hidden } => format!("two_layer_mlp({hidden})"),
                },
                max_relative_error: report.max_relative_error,
            });
        }
    }
    Ok(cases)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BruteforceReport {
    pub batches: usize,
    pub max_abs_diff: f64,
}

impl BruteforceReport {
    pub fn passes(&self) -> bool {
        self.max_abs_diff <= 1e-10
    }
}

/// Compares [`cmrm::cmrm_loss`] with [`bruteforce_cmrm`] on random batches
/// (s <= 64, K <= 10); every third batch repeats rows to force margin ties.
pub fn bruteforce_suite(seed: u64, batches: usize) -> Result<BruteforceReport> {
    let mut worst: f64 = 0.0;
    for b in 0..batches {
        let mut rng = indexed(seed, Stream::Verify, b as u64);
        let s = rng.random_range(1..=BRUTEFORCE_MAX_BATCH);
        let k = rng.random_range(2..=10);
        let mut rows: Vec<Vec<f64>> = (0..s)
            .map(|_| (0..k).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let mut labels: Vec<usize> = (0..s).map(|_| rng.random_range(0..k)).collect();
        if b % 3 == 2 {
            for i in 1..s {
                if rng.random::<f64>() < 0.5 {
                    rows[i] = rows[0].clone();
                    labels[i] = labels[0];
                }
            }
        }
        let logits = Matrix::new(s, k, rows.concat())?;
        let cfg = CmrmConfig {
            alpha: rng.random_range(0.01..0.99),
            lambda: 1.0,
            temp: rng.random_range(0.05..2.0),
            grad_through_threshold: false,
        };
        let fast = cmrm::cmrm_loss(&logits, &labels, &cfg)?.loss;
        let slow = bruteforce_cmrm(&logits, &labels, &cfg)?;
        worst = worst.max((fast - slow).abs());
    }
    Ok(BruteforceReport {
        batches,
        max_abs_diff: worst,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub sample_size: usize,
    pub alpha: f64,
    pub tau_hat: f64,
    pub density: f64,
    /// Accepted band `[0.5 phi(z_alpha), 2 phi(z_alpha)]`.
    pub lower: f64,
    pub upper: f64,
}

impl DensityReport {
    pub fn passes(&self) -> bool {
        self.density >= self.lower && self.density <= self.upper
    }
}

/// Density check on standard-normal margins.
pub fn density_suite(seed: u64, sample_size: usize, alpha: f64) -> Result<DensityReport> {
    let mut rng = substream_verify(seed);
    let margins: Vec<f64> = (0..sample_size)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let (tau_hat, density) = density_at_threshold(&margins, alpha)?;
    let z = std_normal().inverse_cdf(alpha);
    let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    Ok(DensityReport {
        sample_size,
        alpha,
        tau_hat,
        density,
        lower: 0.5 * phi,
        upper: 2.0 * phi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempGapReport {
    pub tau: f64,
    pub temps: Vec<f64>,
    pub gaps: Vec<f64>,
}

impl TempGapReport {
    pub fn passes(&self) -> bool {
        self.gaps.windows(2).all(|w| w[1] <= w[0]) && self.gaps.last() <= self.gaps.first()
    }
}

/// Hard/soft gaps on uniform margins kept at least `4 max(temps)` from tau.
pub fn tempgap_suite(seed: u64) -> Result<TempGapReport> {
    let tau = 0.1;
    let temps = vec![0.05, 0.02, 0.01, 0.005, 0.001];
    let keep_out = 4.0 * temps[0];
    let mut rng = substream_verify(seed);
    let mut margins = Vec::new();
    while margins.len() < 500 {
        let m: f64 = rng.random_range(-1.0..1.0);
        if (m - tau).abs() >= keep_out {
            margins.push(m);
        }
    }
    let gaps = temp_gap(&margins, tau, &temps)?;
    Ok(TempGapReport { tau, temps, gaps })
}

fn substream_verify(seed: u64) -> Rng {
    crate::rng::substream(seed, Stream::Verify)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    #[test]
    fn population_quantiles() {
        assert_eq!(Distribution::Uniform01.quantile(0.5), 0.5);
        assert!(Distribution::StdNormal.quantile(0.5).abs() < 1e-12);
        let b = Distribution::Beta { a: 2.0, b: 2.0 };
        assert!((b.quantile(0.5) - 0.5).abs() < 1e-9);
        assert!(
            (Distribution::StdNormal.cdf(Distribution::StdNormal.quantile(0.15)) - 0.15).abs()
                < 1e-9
        );
        assert!(Distribution::Beta { a: 0.0, b: 1.0 }.validate().is_err());
    }

    #[test]
    fn sup_gap_matches_hand_values() {
        // sample {0.25, 0.75} under U(0,1): gap 0.25 at both points
        assert!((sup_gap(&[0.75, 0.25], &Distribution::Uniform01) - 0.25).abs() < 1e-15);
        let atom = Distribution::PointMass { value: 2.0 };
        assert_eq!(sup_gap(&[2.0; 10], &atom), 0.0);
        // a sample entirely away from the atom misses by 1
        assert_eq!(sup_gap(&[1.0; 3], &atom), 1.0);
    }

    #[test]
    fn sup_gap_against_dense_grid() {
        let mut rng = substream(3, Stream::Verify);
        let sample: Vec<f64> = (0..30).map(|_| rng.random::<f64>()).collect();
        let mut grid_gap: f64 = 0.0;
        for i in 0..=200_000 {
            let t = i as f64 / 200_000.0;
            let emp = sample.iter().filter(|&&x| x <= t).count() as f64 / 30.0;
            grid_gap = grid_gap.max((emp - t).abs());
        }
        let exact = sup_gap(&sample, &Distribution::Uniform01);
        assert!(exact >= grid_gap - 1e-12);
        assert!(exact - grid_gap < 1e-4);
    }

    #[test]
    fn dkw_report_is_deterministic() {
        let a = dkw_check(Distribution::Uniform01, &[16, 64], 200, 0.05, 1).unwrap();
        let b = dkw_check(Distribution::Uniform01, &[16, 64], 200, 0.05, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.median_sup_gap[1] < a.median_sup_gap[0]);
        assert!(dkw_check(Distribution::Uniform01, &[16], 50, 0.05, 1).is_err());
        assert!(dkw_check(Distribution::Uniform01, &[64, 16], 200, 0.05, 1).is_err());
    }

    #[test]
    fn concentration_on_point_mass_is_degenerate() {
        let r = quantile_concentration(
            Distribution::PointMass { value: 0.3 },
            0.15,
            &[8, 16],
            100,
            0,
        );
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn temp_gap_cases() {
        let gaps = temp_gap(&[0.4; 5], 0.4, &[1.0, 0.1, 0.01]).unwrap();
        for g in gaps {
            assert!((g - 0.2).abs() < 1e-15);
        }
        let gaps = temp_gap(&[-0.5, 0.2, 0.9], 0.0, &[0.05, 0.01, 0.001]).unwrap();
        assert!(gaps.windows(2).all(|w| w[1] <= w[0]));
        assert!(gaps[2] < 1e-12);
        assert!(temp_gap(&[0.1], 0.0, &[0.1, 0.5]).is_err());
    }

    #[test]
    fn bruteforce_closed_forms() {
        // a single row: threshold is its own margin, weight one half
        let logits = Matrix::from_rows(&[[1.0, 0.0, -1.0]]).unwrap();
        let cfg = CmrmConfig::default();
        let m = cmrm::batch_margins(&logits, &[0]).unwrap()[0];
        assert!((bruteforce_cmrm(&logits, &[0], &cfg).unwrap() + m / 2.0).abs() < 1e-15);
        let same = Matrix::from_rows(&[[2.0, 0.5]; 6]).unwrap();
        let m = cmrm::batch_margins(&same, &[0; 6]).unwrap()[0];
        assert!((bruteforce_cmrm(&same, &[0; 6], &cfg).unwrap() + m / 2.0).abs() < 1e-15);
    }

    #[test]
    fn grad_check_default_small_model() {
        let mut rng = substream(0, Stream::Verify);
        let params =
            ModelParams::init(Architecture::TwoLayerMlp { hidden: 5 }, 4, 3, &mut rng).unwrap();
        let x = Matrix::new(
            6,
            4,
            (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect(),
        )
        .unwrap();
        let y = [0, 1, 2, 0, 1, 2];
        let r = grad_check(
            &params,
            &x,
            &y,
            &Objective::Base(BaseLossSpec::Ce),
            GRAD_CHECK_STEP,
        )
        .unwrap();
        assert!(r.passes(), "{r:?}");
        let cm = Objective::WithCmrm(
            BaseLossSpec::Ce,
            CmrmConfig {
                lambda: 0.5,
                ..Default::default()
            },
        );
        assert!(grad_check(&params, &x, &y, &cm, GRAD_CHECK_STEP)
            .unwrap()
            .passes());
    }

    #[test]
    fn suites_pass_at_small_scale() {
        let cases = gradcheck_suite(11, 4).unwrap();
        assert_eq!(cases.len(), 32);
        for c in &cases {
            if c.objective.starts_with("hinge") {
                // Exactly cancelling analytic entries (0.0) meet a central
                // difference that resolves to a few ulp of L over 2h; with the
                // 1e-8 denominator floor that reads as ~1e-4 relative error.
                let floor = 8.0 * f64::EPSILON * 2.0 / (2.0 * GRAD_CHECK_STEP) / 1e-8;
                assert!(c.max_relative_error <= floor, "{c:?}");
            } else {
                assert!(c.max_relative_error <= GRAD_CHECK_TOLERANCE, "{c:?}");
            }
        }
        assert!(bruteforce_suite(2, 20).unwrap().passes());
        assert!(density_suite(0, 5000, 0.15).unwrap().passes());
        assert!(tempgap_suite(0).unwrap().passes());
    }

    #[test]
    fn density_on_uniform_margins() {
        let margins: Vec<f64> = (0..2000)
            .map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / 2000.0)
            .collect();
        let (tau, d) = density_at_threshold(&margins, 0.5).unwrap();
        assert!(tau.abs() < 1e-2);
        assert!((d - 0.5).abs() < 0.05, "{d}");
        assert!(matches!(
            density_at_threshold(&[0.3; 60], 0.15),
            Err(Error::Degenerate(_))
        ));
    }

    proptest! {
        #[test]
        fn bruteforce_agrees_with_implementation(
            s in 1usize..40,
            k in 2usize..8,
            alpha in 0.01f64..0.99,
            temp in 0.05f64..2.0,
            seed in any::<u64>(),
        ) {
            let mut rng = substream(seed, Stream::Verify);
            let logits = Matrix::new(s, k, (0..s * k).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
            let labels: Vec<usize> = (0..s).map(|_| rng.random_range(0..k)).collect();
            let cfg = CmrmConfig { alpha, temp, ..Default::default() };
            let fast = cmrm::cmrm_loss(&logits, &labels, &cfg).unwrap().loss;
            let slow = bruteforce_cmrm(&logits, &labels, &cfg).unwrap();
            prop_assert!((fast - slow).abs() <= 1e-10);
        }

        #[test]
        fn hard_limit_counts_retained(s in 1usize..13, seed in any::<u64>()) {
            let mut rng = substream(seed, Stream::Verify);
            let logits = Matrix::new(s, 3, (0..s * 3).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let labels: Vec<usize> = (0..s).map(|_| rng.random_range(0..3)).collect();
            let margins = cmrm::batch_margins(&logits, &labels).unwrap();
            let tau = cmrm::batch_quantile(&margins, 0.15).unwrap().tau;
            let kept: Vec<f64> = margins.iter().copied().filter(|&m| m > tau).collect();
            let hard = if kept.is_empty() { 0.0 } else {
                -kept.iter().sum::<f64>() / kept.len() as f64 * kept.len() as f64 / s as f64
            };
            // the sample at tau contributes half its margin at any temperature
            let at_tau: f64 = margins.iter().filter(|&&m| m == tau).map(|m| -m / 2.0).sum::<f64>() / s as f64;
            let cfg = CmrmConfig { temp: 1e-6, ..Default::default() };
            let soft = cmrm::cmrm_loss(&logits, &labels, &cfg).unwrap().loss;
            prop_assert!((soft - (hard + at_tau)).abs() < 1e-6);
        }
    }
}
