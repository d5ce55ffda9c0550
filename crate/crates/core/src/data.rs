//! Datasets: synthetic blobs, CSV ingestion, splitting and standardization.
//!
//! CSV files are UTF-8 with a header row. One integer column holds labels
//! (`0..K-1`), an optional integer column holds per-row group ids, and every
//! other column must be numeric. Categorical features have to be encoded
//! before loading.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::noise::{self, NoiseKind, NoiseMask, NoiseSpec};
use crate::rng::{substream, Stream};

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.6, 0.1, 0.1, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Cal,
    Test,
}

impl SplitTag {
    pub const ALL: [SplitTag; 4] = [
        SplitTag::Train,
        SplitTag::Val,
        SplitTag::Cal,
        SplitTag::Test,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    pub features: Matrix,
    pub feature_names: Vec<String>,
    pub clean_labels: Vec<usize>,
    pub observed_labels: Vec<usize>,
    pub mask: NoiseMask,
    pub split_of: Vec<SplitTag>,
    pub num_classes: usize,
    /// Per-row group id, when the source provides one.
    pub group_of: Option<Vec<usize>>,
}

impl NoisyDataset {
    /// A clean dataset with every row tagged as training data.
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Label {
                label: bad,
                num_classes,
            });
        }
        let n = labels.len();
        Ok(Self {
            feature_names: (0..features.cols()).map(|j| format!("x{j}")).collect(),
            features,
            observed_labels: labels.clone(),
            clean_labels: labels,
            mask: NoiseMask::clean(n),
            split_of: vec![SplitTag::Train; n],
            num_classes,
            group_of: None,
        })
    }

    pub fn len(&self) -> usize {
        self.clean_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Row indices carrying `tag`, in row order.
    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        self.split_of
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == tag)
            .map(|(i, _)| i)
            .collect()
    }

    /// Label-to-group map derived from the per-row group column.
    pub fn label_groups(&self) -> Result<Vec<usize>> {
        let groups = self
            .group_of
            .as_ref()
            .ok_or_else(|| Error::Group("dataset has no group column".into()))?;
        let mut map: Vec<Option<usize>> = vec![None; self.num_classes];
        for (&y, &g) in self.clean_labels.iter().zip(groups) {
            match map[y] {
                None => map[y] = Some(g),
                Some(prev) if prev != g => {
                    return Err(Error::Group(format!(
                        "label {y} appears in groups {prev} and {g}"
                    )))
                }
                _ => {}
            }
        }
        // labels never seen form their own singleton groups
        let next = map.iter().flatten().max().map_or(0, |m| m + 1);
        Ok(map
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or(next + i))
            .collect())
    }

    /// Corrupts the observed labels of training rows only.
    pub fn inject_train_noise(&mut self, spec: &NoiseSpec) -> Result<()> {
        let train = self.indices(SplitTag::Train);
        let clean: Vec<usize> = train.iter().map(|&i| self.clean_labels[i]).collect();
        let (observed, mask) = noise::inject(&clean, spec, self.num_classes)?;
        for (j, &i) in train.iter().enumerate() {
            self.observed_labels[i] = observed[j];
            self.mask.flipped[i] = mask.flipped[j];
        }
        Ok(())
    }

    /// Writes features, the observed label column and (if present) the group
    /// column.
    pub fn write_csv(&self, path: &Path, label_column: &str) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file, label_column)
    }

    pub fn write_csv_to<W: Write>(&self, writer: W, label_column: &str) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(label_column);
        if self.group_of.is_some() {
            header.push("group");
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.observed_labels[i].to_string());
            if let Some(g) = &self.group_of {
                rec.push(g[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Gaussian blob generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class_count: usize,
    pub class_separation: f64,
    pub seed: u64,
}

/// Mean direction of class `k` in `dim` dimensions.
///
/// Class `k` points along axis `k mod d`, with the sign flipping every `d`
/// classes and the length growing every `2d` classes, so distinct classes have
/// distinct means whenever the separation is positive.
pub fn class_direction(k: usize, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let cycle = k / dim;
    let sign = if cycle.is_multiple_of(2) { 1.0 } else { -1.0 };
    v[k % dim] = sign * (1 + cycle / 2) as f64;
    v
}

/// Isotropic unit-variance Gaussian classes around `separation * direction_k`.
pub fn generate_gaussian_blobs(spec: &SynthSpec) -> Result<NoisyDataset> {
    if spec.num_classes < 2 {
        return Err(Error::config("data.num_classes", "need at least 2 classes"));
    }
    if spec.dim == 0 || spec.per_class_count == 0 {
        return Err(Error::config(
            "data.dim",
            "dimension and per-class count must be >= 1",
        ));
    }
    if !(spec.class_separation.is_finite() && spec.class_separation >= 0.0) {
        return Err(Error::config("data.separation", "must be >= 0"));
    }
    let mut rng = substream(spec.seed, Stream::Data);
    let n = spec.num_classes * spec.per_class_count;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..spec.num_classes {
        let mean: Vec<f64> = class_direction(k, spec.dim)
            .into_iter()
            .map(|c| c * spec.class_separation)
            .collect();
        for _ in 0..spec.per_class_count {
            for &mu in &mean {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(mu + e);
            }
            labels.push(k);
        }
    }
    NoisyDataset::new(Matrix::new(n, spec.dim, data)?, labels, spec.num_classes)
}

/// Loads a CSV file. `K` is inferred as `max(label) + 1` (at least 2).
pub fn load_csv(
    path: &Path,
    label_column: &str,
    group_column: Option<&str>,
) -> Result<NoisyDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, label_column, group_column)
}

pub fn read_csv<R: Read>(
    reader: R,
    label_column: &str,
    group_column: Option<&str>,
) -> Result<NoisyDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Format("empty file".into()));
    }
    let find = |name: &str| headers.iter().position(|h| h == name);
    let label_idx = find(label_column)
        .ok_or_else(|| Error::Format(format!("missing label column \"{label_column}\"")))?;
    let group_idx = match group_column {
        Some(g) => {
            Some(find(g).ok_or_else(|| Error::Format(format!("missing group column \"{g}\"")))?)
        }
        None => None,
    };
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&j| j != label_idx && Some(j) != group_idx)
        .collect();

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        // header is row 1
        let row = r + 2;
        let rec = rec.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => Error::Format(format!("ragged row {row}")),
            _ => Error::Csv(e),
        })?;
        for &j in &feature_cols {
            let cell = rec[j].trim();
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[j].to_string(),
                reason: format!("not a number: \"{cell}\""),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[j].to_string(),
                    reason: "non-finite value".into(),
                });
            }
            data.push(v);
        }
        labels.push(parse_index(&rec[label_idx], row, &headers[label_idx])?);
        if let Some(g) = group_idx {
            groups.push(parse_index(&rec[g], row, &headers[g])?);
        }
    }
    if labels.is_empty() {
        return Err(Error::Format("no data rows".into()));
    }
    let num_classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let features = Matrix::new(labels.len(), feature_cols.len(), data)?;
    let mut ds = NoisyDataset::new(features, labels, num_classes)?;
    ds.feature_names = feature_cols
        .iter()
        .map(|&j| headers[j].to_string())
        .collect();
    if group_idx.is_some() {
        ds.group_of = Some(groups);
    }
    Ok(ds)
}

fn parse_index(cell: &str, row: usize, column: &str) -> Result<usize> {
    cell.trim().parse::<usize>().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        reason: format!("expected a non-negative integer, got \"{}\"", cell.trim()),
    })
}

/// Split sizes for `n` rows by largest remainder; each differs from
/// `fraction * n` by less than 1.
pub fn split_sizes(n: usize, fractions: [f64; 4]) -> Result<[usize; 4]> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::Split("fractions must be non-negative".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!(
            "fractions sum to {total}, expected 1"
        )));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 4];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = (e + 1e-9).floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - sizes[a] as f64;
        let rb = exact[b] - sizes[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    if let Some(pos) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Split(format!(
            "{:?} split is empty",
            SplitTag::ALL[pos]
        )));
    }
    Ok(sizes)
}

/// Assigns split tags by a seeded shuffle of the rows.
pub fn split(dataset: &mut NoisyDataset, fractions: [f64; 4], seed: u64) -> Result<()> {
    let sizes = split_sizes(dataset.len(), fractions)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut substream(seed, Stream::Split));
    let mut at = 0;
    for (tag, size) in SplitTag::ALL.iter().zip(sizes) {
        for &i in &order[at..at + size] {
            dataset.split_of[i] = *tag;
        }
        at += size;
    }
    Ok(())
}

/// Per-column statistics of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(dataset: &NoisyDataset) -> Result<Self> {
        let train = dataset.indices(SplitTag::Train);
        if train.is_empty() {
            return Err(Error::Split("train split is empty".into()));
        }
        let d = dataset.dim();
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in &train {
            for (m, v) in mean.iter_mut().zip(dataset.features.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in &train {
            for ((s, v), m) in var.iter_mut().zip(dataset.features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Ok(Self { mean, std })
    }

    /// Applies `(x - mean) / std`; zero-variance columns are left as they are.
    pub fn apply(&self, features: &mut Matrix) {
        for r in 0..features.rows() {
            for ((v, m), s) in features
                .row_mut(r)
                .iter_mut()
                .zip(&self.mean)
                .zip(&self.std)
            {
                if *s > 0.0 {
                    *v = (*v - m) / s;
                }
            }
        }
    }
}

/// Standardizes all rows with training-split statistics.
pub fn standardize(dataset: &mut NoisyDataset) -> Result<Standardizer> {
    let st = Standardizer::fit(dataset)?;
    st.apply(&mut dataset.features);
    Ok(st)
}

/// Noise spec helper for datasets with per-row groups.
pub fn group_noise(dataset: &NoisyDataset, rate: f64, seed: u64) -> Result<NoiseSpec> {
    Ok(NoiseSpec {
        kind: NoiseKind::GroupConditional {
            group_of: dataset.label_groups()?,
        },
        rate,
        seed,
    })
}
