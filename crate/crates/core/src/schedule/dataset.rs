use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncodedSchedule, LabelVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pid: String,
    pub schedule: EncodedSchedule,
    pub labels: LabelVector,
}

/// Samples with a fixed train/validation/test assignment.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
    splits: Vec<Split>,
    seed: u64,
}

pub const MIN_SPLIT_SAMPLES: usize = 10;

/// Deterministic 80/10/10 partition. The assignment depends only on the seed
/// and the order of `samples`.
pub fn split_dataset(samples: Vec<Sample>, seed: u64) -> Result<Dataset> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Empty("dataset".into()));
    }
    if n < MIN_SPLIT_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_SPLIT_SAMPLES,
            got: n,
        });
    }
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = (n - n_train) / 2;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    Ok(Dataset {
        samples,
        splits,
        seed,
    })
}

impl Dataset {
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    /// Sample indices belonging to `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().zip(&self.splits).filter(move |(_, &s)| s == split).map(|(x, _)| x)
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|&&s| s == split).count()
    }
}

/// Raw inverse-frequency weight of every sample's full label combination,
/// counted over the training split. Combinations unseen in training count once.
pub fn label_weights(dataset: &Dataset) -> Vec<f64> {
    let mut freq: HashMap<&LabelVector, usize> = HashMap::new();
    for s in dataset.split(Split::Train) {
        *freq.entry(&s.labels).or_default() += 1;
    }
    dataset
        .samples()
        .iter()
        .map(|s| 1.0 / freq.get(&s.labels).copied().unwrap_or(0).max(1) as f64)
        .collect()
}

/// Rescales positive weights to average one.
pub fn batch_normalize(raw: &[f64]) -> Vec<f64> {
    if raw.is_empty() {
        return Vec::new();
    }
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.iter().map(|w| w / mean).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{EOS, SOS};
    use proptest::prelude::*;

    fn dummy(n: usize, label_of: impl Fn(usize) -> usize) -> Vec<Sample> {
        let mut acts = vec![SOS, 2];
        acts.extend([EOS; 4]);
        let mut durs = vec![0.0, 1.0];
        durs.extend([0.0; 4]);
        (0..n)
            .map(|i| Sample {
                pid: format!("p{i}"),
                schedule: EncodedSchedule { acts: acts.clone(), durs: durs.clone() },
                labels: LabelVector(vec![label_of(i)]),
            })
            .collect()
    }

    #[test]
    fn hundred_splits_eighty_ten_ten() {
        let d = split_dataset(dummy(100, |_| 0), 7).unwrap();
        assert_eq!(d.count(Split::Train), 80);
        assert_eq!(d.count(Split::Validation), 10);
        assert_eq!(d.count(Split::Test), 10);
    }

    #[test]
    fn ten_splits_eight_one_one() {
        let d = split_dataset(dummy(10, |_| 0), 3).unwrap();
        assert_eq!(
            [d.count(Split::Train), d.count(Split::Validation), d.count(Split::Test)],
            [8, 1, 1]
        );
    }

    #[test]
    fn split_is_deterministic() {
        let a = split_dataset(dummy(100, |_| 0), 7).unwrap();
        let b = split_dataset(dummy(100, |_| 0), 7).unwrap();
        assert_eq!(a.splits, b.splits);
        let c = split_dataset(dummy(100, |_| 0), 8).unwrap();
        assert_ne!(a.splits, c.splits);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_dataset(vec![], 0), Err(Error::Empty(_))));
        assert!(matches!(split_dataset(dummy(5, |_| 0), 0), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn symmetric_combos_get_unit_weights() {
        let raw = [0.5, 0.5, 0.5, 0.5];
        assert_eq!(batch_normalize(&raw), [1.0; 4]);
    }

    #[test]
    fn skewed_combos_are_upweighted() {
        // combos A,A,A,B: raw 1/3,1/3,1/3,1 -> mean 1/2
        let raw = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 1.0];
        let w = batch_normalize(&raw);
        let expect = [2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 2.0];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(batch_normalize(&[0.25]), [1.0]);
    }

    #[test]
    fn weights_use_training_frequencies() {
        let d = split_dataset(dummy(40, |i| usize::from(i % 4 == 0)), 1).unwrap();
        let w = label_weights(&d);
        let n_rare = d.split(Split::Train).filter(|s| s.labels.0[0] == 1).count();
        for (s, w) in d.samples().iter().zip(&w) {
            if s.labels.0[0] == 1 {
                assert!((w - 1.0 / n_rare as f64).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn normalized_weights_average_one(raw in proptest::collection::vec(1e-4f64..10.0, 1..300)) {
            let w = batch_normalize(&raw);
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-9);
        }
    }
}
