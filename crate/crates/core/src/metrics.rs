//! Classification metrics and margin diagnostics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseMask;

/// Soft weights below this value count as filtered.
pub const FILTER_CUTOFF: f64 = 0.5;

/// Number of KDE evaluation points over `[-1, 1]`.
pub const KDE_GRID_POINTS: usize = 201;

/// Evaluation metrics for one split. Absent values serialize as `null`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub m_apss: Option<f64>,
    pub pc_apss: Option<f64>,
    pub nc_apss: Option<f64>,
    pub coverage: Option<f64>,
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

fn check_binary(scores: &[f64], labels: &[usize], need_both: bool) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Metric("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if need_both && (pos == 0 || neg == 0) {
        return Err(Error::Metric("both classes must be present".into()));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUROC; tied positive/negative pairs count one half.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels, true)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie blocks
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Area under the precision-recall step curve (average precision), sweeping
/// scores in descending order with ties handled as one block.
pub fn auprc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels, false)?;
    if pos == 0 {
        return Err(Error::Metric("AUPRC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut area) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut block_tp = 0;
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            block_tp += labels[order[j]];
            j += 1;
        }
        tp += block_tp;
        seen += j - i;
        if block_tp > 0 {
            area += (block_tp as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Ok(area)
}

/// `(FPR, FNR)` with positives predicted iff `score >= threshold`.
pub fn fpr_fnr(scores: &[f64], labels: &[usize], threshold: f64) -> Result<(f64, f64)> {
    let (pos, neg) = check_binary(scores, labels, true)?;
    let mut fp = 0;
    let mut fnn = 0;
    for (&s, &y) in scores.iter().zip(labels) {
        let predicted = s >= threshold;
        match (predicted, y) {
            (true, 0) => fp += 1,
            (false, 1) => fnn += 1,
            _ => {}
        }
    }
    Ok((fp as f64 / neg as f64, fnn as f64 / pos as f64))
}

/// Among samples with weight below [`FILTER_CUTOFF`], the fraction that are
/// actually corrupted. `None` when nothing is filtered.
pub fn filtered_noise_ratio(weights: &[f64], mask: &NoiseMask) -> Result<Option<f64>> {
    if weights.len() != mask.len() {
        return Err(Error::Metric(format!(
            "{} weights for {} mask entries",
            weights.len(),
            mask.len()
        )));
    }
    let (mut filtered, mut noisy) = (0usize, 0usize);
    for (&w, &f) in weights.iter().zip(&mask.flipped) {
        if w < FILTER_CUTOFF {
            filtered += 1;
            noisy += f as usize;
        }
    }
    Ok((filtered > 0).then(|| noisy as f64 / filtered as f64))
}

/// Clean/noisy margin counts over `[-1, 1]` and a pooled Gaussian KDE.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginHistogram {
    pub bin_edges: Vec<f64>,
    pub clean_counts: Vec<usize>,
    pub noisy_counts: Vec<usize>,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl MarginHistogram {
    fn bin_of(&self, x: f64) -> usize {
        let bins = self.clean_counts.len();
        let t = ((x + 1.0) / 2.0 * bins as f64).floor();
        (t.max(0.0) as usize).min(bins - 1)
    }

    /// CSV with one row per grid point; the count columns hold the counts of
    /// the histogram bin containing that point.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(["grid_point", "density", "clean_count", "noisy_count"])?;
        for (&x, &d) in self.grid.iter().zip(&self.density) {
            let b = self.bin_of(x);
            w.write_record(&[
                x.to_string(),
                d.to_string(),
                self.clean_counts[b].to_string(),
                self.noisy_counts[b].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

pub fn margin_histogram(margins: &[f64], mask: &NoiseMask, bins: usize) -> Result<MarginHistogram> {
    if margins.is_empty() {
        return Err(Error::Metric("margin histogram of an empty sample".into()));
    }
    if bins < 2 {
        return Err(Error::Metric("need at least 2 bins".into()));
    }
    if margins.len() != mask.len() {
        return Err(Error::Metric("margins and mask differ in length".into()));
    }
    let bandwidth = silverman_bandwidth(margins)?;
    let bin_edges: Vec<f64> = (0..=bins)
        .map(|i| -1.0 + 2.0 * i as f64 / bins as f64)
        .collect();
    let grid: Vec<f64> = (0..KDE_GRID_POINTS)
        .map(|i| -1.0 + 2.0 * i as f64 / (KDE_GRID_POINTS - 1) as f64)
        .collect();
    let density = grid.iter().map(|&x| kde(margins, bandwidth, x)).collect();
    let mut hist = MarginHistogram {
        bin_edges,
        clean_counts: vec![0; bins],
        noisy_counts: vec![0; bins],
        grid,
        density,
        bandwidth,
    };
    for (&m, &noisy) in margins.iter().zip(&mask.flipped) {
        let b = hist.bin_of(m);
        if noisy {
            hist.noisy_counts[b] += 1;
        } else {
            hist.clean_counts[b] += 1;
        }
    }
    Ok(hist)
}

/// `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`, falling back to whichever spread
/// is positive.
pub fn silverman_bandwidth(sample: &[f64]) -> Result<f64> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::Degenerate(
            "bandwidth needs at least 2 points".into(),
        ));
    }
    if sample.iter().all(|&v| v == sample[0]) {
        return Err(Error::Degenerate(
            "zero bandwidth: all values identical".into(),
        ));
    }
    let mean = sample.iter().sum::<f64>() / n as f64;
    let sd = (sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = (interpolated_quantile(&sorted, 0.75) - interpolated_quantile(&sorted, 0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => {
            return Err(Error::Degenerate(
                "zero bandwidth: all values identical".into(),
            ))
        }
    };
    Ok(0.9 * spread * (n as f64).powf(-0.2))
}

fn interpolated_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Gaussian kernel density estimate at `x`.
pub fn kde(sample: &[f64], bandwidth: f64, x: f64) -> f64 {
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * bandwidth * sample.len() as f64);
    sample
        .iter()
        .map(|v| {
            let u = (x - v) / bandwidth;
            (-0.5 * u * u).exp()
        })
        .sum::<f64>()
        * norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 1], &[0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    fn brute_auroc(scores: &[f64], labels: &[usize]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    total += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        total / pairs
    }

    /// Exhaustive threshold enumeration of the step-curve AP.
    fn brute_auprc(scores: &[f64], labels: &[usize]) -> f64 {
        let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut prev_recall = 0.0;
        let mut area = 0.0;
        for t in thresholds {
            let tp = scores
                .iter()
                .zip(labels)
                .filter(|(&s, &y)| s >= t && y == 1)
                .count() as f64;
            let predicted = scores.iter().filter(|&&s| s >= t).count() as f64;
            let recall = tp / pos;
            area += (recall - prev_recall) * (tp / predicted);
            prev_recall = recall;
        }
        area
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
        let s = [0.9, 0.8, 0.4, 0.2];
        let y = [1, 0, 1, 0];
        assert_eq!(brute_auroc(&s, &y), 0.75);
        assert_eq!(auroc(&s, &y).unwrap(), 0.75);
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.3, 0.2, 0.1], &[1, 1, 1]).unwrap(), 1.0);
        let s = [0.9, 0.7, 0.5, 0.3, 0.1];
        let y = [0, 0, 0, 0, 1];
        assert!((brute_auprc(&s, &y) - 0.2).abs() < 1e-15);
        assert!((auprc(&s, &y).unwrap() - 0.2).abs() < 1e-15);
        assert!(auprc(&[0.1], &[0]).is_err());
    }

    #[test]
    fn fpr_fnr_examples() {
        assert_eq!(fpr_fnr(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), (0.0, 0.0));
        assert_eq!(fpr_fnr(&[0.9, 0.8], &[1, 0], 0.5).unwrap(), (1.0, 0.0));
        // 6 samples counted by hand: TP=2 (0.9, 0.6), FN=1 (0.3),
        // FP=1 (0.7), TN=2 (0.2, 0.4)
        let s = [0.9, 0.6, 0.3, 0.7, 0.2, 0.4];
        let y = [1, 1, 1, 0, 0, 0];
        let (fpr, fnr) = fpr_fnr(&s, &y, 0.5).unwrap();
        assert!((fpr - 1.0 / 3.0).abs() < 1e-15);
        assert!((fnr - 1.0 / 3.0).abs() < 1e-15);
        assert!(fpr_fnr(&[0.1], &[0], 0.5).is_err());
    }

    #[test]
    fn filtered_ratio_examples() {
        let mask = NoiseMask {
            flipped: vec![true, false, true],
        };
        assert_eq!(filtered_noise_ratio(&[0.9, 0.8, 0.7], &mask).unwrap(), None);
        assert_eq!(
            filtered_noise_ratio(&[0.1, 0.8, 0.2], &mask).unwrap(),
            Some(1.0)
        );
        let mask = NoiseMask {
            flipped: vec![true, true, true, true, false, false],
        };
        let w = [0.1, 0.2, 0.3, 0.4, 0.45, 0.9];
        assert_eq!(filtered_noise_ratio(&w, &mask).unwrap(), Some(0.8));
        assert!(filtered_noise_ratio(&w, &NoiseMask::clean(2)).is_err());
    }

    #[test]
    fn histogram_counts_and_kde_mass() {
        let margins = [0.51, 0.52, 0.53, 0.55];
        let h = margin_histogram(&margins, &NoiseMask::clean(4), 4).unwrap();
        assert_eq!(h.clean_counts, vec![0, 0, 0, 4]);
        assert_eq!(h.grid.len(), KDE_GRID_POINTS);

        // bell-shaped interior sample; trapezoid rule over the grid
        let sample: Vec<f64> = (0..400)
            .map(|i| 0.25 * ((i as f64 + 0.5) / 400.0 * 6.0 - 3.0).tanh())
            .collect();
        let mut mask = NoiseMask::clean(400);
        for i in (0..400).step_by(5) {
            mask.flipped[i] = true;
        }
        let h = margin_histogram(&sample, &mask, 20).unwrap();
        assert_eq!(h.noisy_counts.iter().sum::<usize>(), 80);
        assert_eq!(h.clean_counts.iter().sum::<usize>(), 320);
        let dx = 2.0 / (KDE_GRID_POINTS - 1) as f64;
        let integral: f64 = h.density.windows(2).map(|w| 0.5 * (w[0] + w[1]) * dx).sum();
        assert!((integral - 1.0).abs() < 1e-2, "integral {integral}");

        assert!(matches!(
            margin_histogram(&[], &NoiseMask::clean(0), 4),
            Err(Error::Metric(_))
        ));
        assert!(matches!(
            margin_histogram(&[0.2; 5], &NoiseMask::clean(5), 4),
            Err(Error::Degenerate(_))
        ));
    }

    proptest! {
        #[test]
        fn auroc_matches_pairs_and_symmetry(
            raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..40),
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| (s * 10.0).round() / 10.0).collect();
            let labels: Vec<usize> = raw.iter().map(|(_, b)| *b as usize).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((a - brute_auroc(&scores, &labels)).abs() < 1e-12);
            let flipped: Vec<usize> = labels.iter().map(|y| 1 - y).collect();
            // ties count one half on both sides, so the identity holds with ties too
            prop_assert!((a + auroc(&scores, &flipped).unwrap() - 1.0).abs() < 1e-12);
            let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3) + 2.0).collect();
            prop_assert!((a - auroc(&cubed, &labels).unwrap()).abs() < 1e-12);
            prop_assert!((auprc(&scores, &labels).unwrap() - brute_auprc(&scores, &labels)).abs() < 1e-12);
        }

        #[test]
        fn filtered_ratio_matches_two_pass(
            raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 0..50),
        ) {
            let w: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let mask = NoiseMask { flipped: raw.iter().map(|r| r.1).collect() };
            let filtered: Vec<usize> = (0..w.len()).filter(|&i| w[i] < 0.5).collect();
            let noisy = filtered.iter().filter(|&&i| mask.flipped[i]).count();
            let expected = if filtered.is_empty() { None } else { Some(noisy as f64 / filtered.len() as f64) };
            prop_assert_eq!(filtered_noise_ratio(&w, &mask).unwrap(), expected);
        }

        #[test]
        fn rates_in_unit_interval(raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let labels: Vec<usize> = raw.iter().map(|r| r.1 as usize).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let (fpr, fnr) = fpr_fnr(&scores, &labels, 0.5).unwrap();
            prop_assert!((0.0..=1.0).contains(&fpr) && (0.0..=1.0).contains(&fnr));
            prop_assert_eq!(fpr_fnr(&scores, &labels, 0.0).unwrap().1, 0.0);
        }
    }
}
