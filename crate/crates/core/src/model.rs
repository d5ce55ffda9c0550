//! Linear and two-layer MLP classifiers with hand-written reverse mode.
//!
//! A model maps a feature batch `X` (s x d) to logits (s x K). Probabilities
//! come from a max-subtracted softmax. For binary models (K = 2) the positive
//! class probability is `sigmoid(z1 - z0)`, which is the softmax written in
//! its two-class form.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

/// Logits for a batch, one row per sample.
pub type LogitBatch = Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    TwoLayerMlp { hidden: usize },
}

/// Affine layer; `weights` is `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Dense {
        Dense {
            weights: Matrix::zeros(self.weights.rows(), self.weights.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn apply(&self, input: &Matrix) -> Matrix {
        let mut out = input.matmul_transpose(&self.weights);
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        out
    }
}

/// Parameters of a classifier. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<Dense>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(
        architecture: Architecture,
        input_dim: usize,
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if input_dim == 0 {
            return Err(Error::config("input_dim", "must be positive"));
        }
        let dims: Vec<(usize, usize)> = match architecture {
            Architecture::Linear => vec![(input_dim, num_classes)],
            Architecture::TwoLayerMlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::config("model.hidden", "must be positive"));
                }
                vec![(input_dim, hidden), (hidden, num_classes)]
            }
        };
        let layers = dims
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Dense {
                    weights: Matrix::new(fan_out, fan_in, data).expect("finite init"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            architecture,
            input_dim,
            num_classes,
            layers,
        })
    }

    /// Linear model from explicit `K x d` weights and bias.
    pub fn linear(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Shape(format!(
                "bias length {} for {} outputs",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self {
            architecture: Architecture::Linear,
            input_dim: weights.cols(),
            num_classes: weights.rows(),
            layers: vec![Dense { weights, bias }],
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            architecture: self.architecture,
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            layers: self.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer (weights then bias).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let w = l.weights.as_mut_slice();
            w.copy_from_slice(&values[at..at + w.len()]);
            at += w.len();
            let n = l.bias.len();
            l.bias.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Visits every (parameter, other) pair in flattened order.
    pub(crate) fn zip_mut(&mut self, other: &ModelParams, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, &y) in a
                .weights
                .as_mut_slice()
                .iter_mut()
                .zip(b.weights.as_slice())
            {
                f(x, y);
            }
            for (x, &y) in a.bias.iter_mut().zip(&b.bias) {
                f(x, y);
            }
        }
    }

    fn check_features(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "features have {} columns, model expects {}",
                features.cols(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

/// Logits for every row of `features`.
pub fn forward(params: &ModelParams, features: &Matrix) -> Result<LogitBatch> {
    params.check_features(features)?;
    let mut act = params.layers[0].apply(features);
    for layer in &params.layers[1..] {
        relu_in_place(&mut act);
        act = layer.apply(&act);
    }
    Ok(act)
}

/// Gradients of `sum_i <logit_grad_i, f(x_i)>` with respect to every
/// parameter. The ReLU derivative at exactly zero is taken as zero.
pub fn backward(
    params: &ModelParams,
    features: &Matrix,
    logit_grad: &Matrix,
) -> Result<ModelParams> {
    params.check_features(features)?;
    if logit_grad.rows() != features.rows() || logit_grad.cols() != params.num_classes {
        return Err(Error::Shape(format!(
            "logit gradient is {}x{}, expected {}x{}",
            logit_grad.rows(),
            logit_grad.cols(),
            features.rows(),
            params.num_classes
        )));
    }
    let mut grads = params.zeros_like();
    match params.layers.as_slice() {
        [out] => {
            grads.layers[0].weights = logit_grad.transpose_matmul(features);
            grads.layers[0].bias = logit_grad.column_sums();
            debug_assert_eq!(grads.layers[0].weights.rows(), out.weights.rows());
        }
        [hidden, out] => {
            let pre = hidden.apply(features);
            let mut act = pre.clone();
            relu_in_place(&mut act);
            grads.layers[1].weights = logit_grad.transpose_matmul(&act);
            grads.layers[1].bias = logit_grad.column_sums();
            let mut d_hidden = logit_grad.matmul(&out.weights);
            for (d, &p) in d_hidden.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if p <= 0.0 {
                    *d = 0.0;
                }
            }
            grads.layers[0].weights = d_hidden.transpose_matmul(features);
            grads.layers[0].bias = d_hidden.column_sums();
        }
        _ => unreachable!("architectures have one or two layers"),
    }
    Ok(grads)
}

fn relu_in_place(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// A probability vector on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates entries in `[0, 1]` summing to one within 1e-6.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Shape("probability vector needs K >= 2".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::Numeric("probability vector"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Shape(format!("probabilities sum to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Lowest index attaining the maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.len() < 2 {
        return Err(Error::Shape("softmax needs K >= 2".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("logits"));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(ProbVector(out))
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

/// Row-wise softmax of a logit batch.
pub fn probabilities(logits: &LogitBatch) -> Vec<ProbVector> {
    logits
        .iter_rows()
        .map(|row| {
            let mut p = vec![0.0; row.len()];
            softmax_into(row, &mut p);
            ProbVector(p)
        })
        .collect()
}

/// `1 / (1 + exp(-z))`, evaluated without overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Positive-class probability of a two-logit row.
#[inline]
pub fn positive_probability(row: &[f64]) -> f64 {
    sigmoid(row[1] - row[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn identity_linear_passes_features_through() {
        let w = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let m = ModelParams::linear(w, vec![0.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[[3.0, -1.0]]).unwrap();
        assert_eq!(forward(&m, &x).unwrap().as_slice(), &[3.0, -1.0]);
    }

    #[test]
    fn zero_weights_return_bias() {
        let m = ModelParams::linear(Matrix::zeros(2, 3), vec![1.0, 2.0]).unwrap();
        let x = Matrix::from_rows(&[[5.0, -2.0, 0.3]]).unwrap();
        assert_eq!(forward(&m, &x).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn scalar_affine_and_its_gradient() {
        // One input, one output: not a classifier, but the algebra is the same.
        let m = ModelParams {
            architecture: Architecture::Linear,
            input_dim: 1,
            num_classes: 1,
            layers: vec![Dense {
                weights: Matrix::new(1, 1, vec![2.0]).unwrap(),
                bias: vec![1.0],
            }],
        };
        let x = Matrix::new(1, 1, vec![3.0]).unwrap();
        assert_eq!(forward(&m, &x).unwrap().as_slice(), &[7.0]);
        let g = backward(&m, &x, &Matrix::new(1, 1, vec![1.0]).unwrap()).unwrap();
        assert_eq!(g.layers[0].weights.as_slice(), &[3.0]);
        assert_eq!(g.layers[0].bias, vec![1.0]);
    }

    #[test]
    fn zero_logit_gradient_gives_zero_parameter_gradient() {
        let mut rng = substream(3, Stream::Init);
        let m = ModelParams::init(Architecture::TwoLayerMlp { hidden: 4 }, 3, 2, &mut rng).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3], [1.0, -1.0, 0.5]]).unwrap();
        let g = backward(&m, &x, &Matrix::zeros(2, 2)).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_errors() {
        let m = ModelParams::linear(Matrix::zeros(2, 3), vec![0.0; 2]).unwrap();
        assert!(matches!(
            forward(&m, &Matrix::zeros(1, 2)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            backward(&m, &Matrix::zeros(1, 3), &Matrix::zeros(1, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(p.as_slice().iter().all(|v| close(*v, 1.0 / 3.0, 1e-15)));
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!(close(p.as_slice()[0], 2.0 / 3.0, 1e-15));
        assert!(close(p.as_slice()[1], 1.0 / 3.0, 1e-15));
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[1.0]).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!(sigmoid(30.0) > sigmoid(20.0));
        assert!(close(sigmoid(-1.7), 1.0 - sigmoid(1.7), 1e-15));
        assert_eq!(sigmoid(-800.0), 0.0);
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let mut rng = substream(1, Stream::Init);
        let m = ModelParams::init(Architecture::TwoLayerMlp { hidden: 5 }, 4, 3, &mut rng).unwrap();
        let l0 = (6.0f64 / 9.0).sqrt();
        assert!(m.layers[0].weights.as_slice().iter().all(|w| w.abs() <= l0));
        assert!(m.layers.iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
        assert!(ModelParams::init(Architecture::Linear, 4, 1, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 2..12)) {
            let p = softmax(&logits).unwrap();
            let total: f64 = p.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            prop_assert!(p.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn softmax_is_shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 2..8),
            c in -30.0f64..30.0,
        ) {
            let p = softmax(&logits).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|z| z + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000) {
            let mut rng = substream(seed, Stream::Init);
            let m = ModelParams::init(Architecture::TwoLayerMlp { hidden: 6 }, 3, 4, &mut rng).unwrap();
            let x = Matrix::from_rows(&[[0.3, -0.7, 1.1], [2.0, 0.0, -0.4]]).unwrap();
            let a = forward(&m, &x).unwrap();
            let b = forward(&m, &x).unwrap();
            prop_assert_eq!(
                a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
