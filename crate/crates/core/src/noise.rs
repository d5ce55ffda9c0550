//! Label-noise injectors.
//!
//! Exactly `floor(rate * n)` indices, chosen uniformly without replacement,
//! are corrupted. The clean labels are kept so diagnostics can tell which
//! samples were flipped.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    /// Uniformly drawn different label.
    Symmetric,
    /// `(y + 1) mod K`.
    Circular,
    /// Uniformly drawn different label from the same group;
    /// `group_of[label]` is the label's group id.
    GroupConditional { group_of: Vec<usize> },
    /// `0 <-> 1`.
    BinaryFlip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub seed: u64,
}

/// `flipped[i]` is true iff the observed label differs from the clean one.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NoiseMask {
    pub flipped: Vec<bool>,
}

impl NoiseMask {
    pub fn clean(n: usize) -> Self {
        Self {
            flipped: vec![false; n],
        }
    }

    pub fn count(&self) -> usize {
        self.flipped.iter().filter(|f| **f).count()
    }

    pub fn len(&self) -> usize {
        self.flipped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flipped.is_empty()
    }
}

/// Number of corrupted samples for `rate` over `n`.
pub fn flip_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64) + 1e-9).floor().min(n as f64) as usize
}

/// Corrupts `clean_labels` according to `spec`.
pub fn inject(
    clean_labels: &[usize],
    spec: &NoiseSpec,
    num_classes: usize,
) -> Result<(Vec<usize>, NoiseMask)> {
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(Error::config("noise.rate", "must lie in [0, 1]"));
    }
    if num_classes < 2 {
        return Err(Error::config("num_classes", "need at least 2 classes"));
    }
    if let Some(&bad) = clean_labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Label {
            label: bad,
            num_classes,
        });
    }
    match &spec.kind {
        NoiseKind::BinaryFlip if num_classes != 2 => {
            return Err(Error::config(
                "noise.kind",
                "binary_flip requires 2 classes",
            ))
        }
        NoiseKind::GroupConditional { group_of } if group_of.len() != num_classes => {
            return Err(Error::Group(format!(
                "group map covers {} labels, expected {num_classes}",
                group_of.len()
            )))
        }
        _ => {}
    }

    let n = clean_labels.len();
    let m = flip_count(spec.rate, n);
    let mut rng = substream(spec.seed, Stream::Noise);
    let mut chosen = index::sample(&mut rng, n, m).into_vec();
    chosen.sort_unstable();

    let mut observed = clean_labels.to_vec();
    let mut mask = NoiseMask::clean(n);
    for i in chosen {
        let y = clean_labels[i];
        let new = match &spec.kind {
            NoiseKind::Symmetric => {
                let r = rng.random_range(0..num_classes - 1);
                if r >= y {
                    r + 1
                } else {
                    r
                }
            }
            NoiseKind::Circular => (y + 1) % num_classes,
            NoiseKind::BinaryFlip => 1 - y,
            NoiseKind::GroupConditional { group_of } => {
                let peers: Vec<usize> = (0..num_classes)
                    .filter(|&c| c != y && group_of[c] == group_of[y])
                    .collect();
                if peers.is_empty() {
                    return Err(Error::Group(format!(
                        "label {y} is alone in group {}",
                        group_of[y]
                    )));
                }
                peers[rng.random_range(0..peers.len())]
            }
        };
        observed[i] = new;
        mask.flipped[i] = true;
    }
    Ok((observed, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: NoiseKind, rate: f64) -> NoiseSpec {
        NoiseSpec {
            kind,
            rate,
            seed: 11,
        }
    }

    #[test]
    fn zero_rate_is_noop() {
        let clean = vec![0, 1, 2, 1];
        let (obs, mask) = inject(&clean, &spec(NoiseKind::Symmetric, 0.0), 3).unwrap();
        assert_eq!(obs, clean);
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn circular_full_rate() {
        let (obs, mask) = inject(&[0, 1, 4], &spec(NoiseKind::Circular, 1.0), 5).unwrap();
        assert_eq!(obs, vec![1, 2, 0]);
        assert_eq!(mask.flipped, vec![true; 3]);
    }

    #[test]
    fn symmetric_exact_count() {
        let clean: Vec<usize> = (0..1000).map(|i| i % 7).collect();
        let (obs, mask) = inject(&clean, &spec(NoiseKind::Symmetric, 0.2), 7).unwrap();
        assert_eq!(mask.count(), 200);
        // brute-force cross-check against the mask
        let differing = clean.iter().zip(&obs).filter(|(a, b)| a != b).count();
        assert_eq!(differing, 200);
        for i in 0..1000 {
            assert_eq!(mask.flipped[i], clean[i] != obs[i]);
        }
    }

    #[test]
    fn group_conditional_stays_in_group() {
        let group_of = vec![0, 0, 1, 1, 1];
        let clean: Vec<usize> = (0..200).map(|i| i % 5).collect();
        let (obs, mask) = inject(
            &clean,
            &spec(
                NoiseKind::GroupConditional {
                    group_of: group_of.clone(),
                },
                0.5,
            ),
            5,
        )
        .unwrap();
        assert_eq!(mask.count(), 100);
        for (c, o) in clean.iter().zip(&obs) {
            assert_eq!(group_of[*c], group_of[*o]);
        }
    }

    #[test]
    fn singleton_group_is_an_error() {
        let kind = NoiseKind::GroupConditional {
            group_of: vec![0, 1, 1],
        };
        assert!(matches!(
            inject(&[0, 0, 0], &spec(kind, 1.0), 3),
            Err(Error::Group(_))
        ));
    }

    #[test]
    fn binary_flip_requires_two_classes() {
        assert!(inject(&[0, 1, 2], &spec(NoiseKind::BinaryFlip, 0.5), 3).is_err());
        let (obs, _) = inject(&[0, 1], &spec(NoiseKind::BinaryFlip, 1.0), 2).unwrap();
        assert_eq!(obs, vec![1, 0]);
    }

    proptest! {
        #[test]
        fn mask_matches_labels_and_count(
            clean in prop::collection::vec(0usize..6, 0..300),
            rate in 0.0f64..=1.0,
            seed in 0u64..50,
            which in 0usize..4,
        ) {
            let (kind, k) = match which {
                0 => (NoiseKind::Symmetric, 6),
                1 => (NoiseKind::Circular, 6),
                2 => (NoiseKind::GroupConditional { group_of: vec![0, 0, 0, 1, 1, 1] }, 6),
                _ => (NoiseKind::BinaryFlip, 2),
            };
            let clean: Vec<usize> = clean.into_iter().map(|y| y % k).collect();
            let s = NoiseSpec { kind, rate, seed };
            let (obs, mask) = inject(&clean, &s, k).unwrap();
            prop_assert_eq!(mask.count(), flip_count(rate, clean.len()));
            for i in 0..clean.len() {
                prop_assert_eq!(mask.flipped[i], obs[i] != clean[i]);
            }
            let again = inject(&clean, &s, k).unwrap();
            prop_assert_eq!(again.0, obs);
        }
    }
}
