//! Repeated random train/test partitions.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Sample;
use crate::error::{PfiqaError, Result};

pub const MIN_CONTENTS: usize = 5;

/// Sample indices of one partition, each list sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn content_ids<'a>(&self, samples: &'a [Sample], test: bool) -> BTreeSet<&'a str> {
        let idx = if test { &self.test } else { &self.train };
        idx.iter().map(|&i| samples[i].content_id.as_str()).collect()
    }

    /// No content appears on both sides.
    pub fn is_leak_free(&self, samples: &[Sample]) -> bool {
        self.content_ids(samples, false).is_disjoint(&self.content_ids(samples, true))
    }
}

/// `n_repeats` independent partitions at `ratio`.
///
/// With `grouped` the unit of partitioning is the content id, so every sample
/// of one content lands on the same side; otherwise samples are split
/// individually.
pub fn make_splits(samples: &[Sample], seed: u64, ratio: f64, n_repeats: usize, grouped: bool) -> Result<Vec<Split>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(PfiqaError::Config(format!("train ratio {ratio} must lie in (0, 1)")));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.content_id.as_str()).or_default().push(i);
    }
    if groups.len() < MIN_CONTENTS {
        return Err(PfiqaError::TooFew {
            what: "contents",
            needed: MIN_CONTENTS,
            got: groups.len(),
        });
    }
    let units: Vec<Vec<usize>> = if grouped {
        groups.into_values().collect()
    } else {
        (0..samples.len()).map(|i| vec![i]).collect()
    };
    let n_train = ((units.len() as f64 * ratio).round() as usize).clamp(1, units.len() - 1);
    let mut out = Vec::with_capacity(n_repeats);
    for r in 0..n_repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let mut order: Vec<usize> = (0..units.len()).collect();
        order.shuffle(&mut rng);
        let collect = |ids: &[usize]| {
            let mut v: Vec<usize> = ids.iter().flat_map(|&u| units[u].iter().copied()).collect();
            v.sort_unstable();
            v
        };
        out.push(Split {
            train: collect(&order[..n_train]),
            test: collect(&order[n_train..]),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::RgbImage;

    fn fake(contents: usize, per: usize) -> Vec<Sample> {
        let img = RgbImage::filled(2, 2, 0.5);
        (0..contents * per)
            .map(|i| Sample {
                sr_image: img.clone(),
                lr_image_upsampled: img.clone(),
                scale_factor: 2.0,
                mos: Some(0.5),
                dataset_id: "t".into(),
                content_id: format!("c{}", i / per),
                method_id: format!("m{}", i % per),
            })
            .collect()
    }

    #[test]
    fn sixty_contents_split_48_12() {
        let samples = fake(60, 3);
        for s in make_splits(&samples, 0, 0.8, 5, true).unwrap() {
            assert_eq!(s.content_ids(&samples, false).len(), 48);
            assert_eq!(s.content_ids(&samples, true).len(), 12);
            assert!(s.is_leak_free(&samples));
            assert_eq!(s.train.len() + s.test.len(), 180);
        }
    }

    #[test]
    fn deterministic_and_distinct() {
        let samples = fake(10, 2);
        let a = make_splits(&samples, 0, 0.8, 5, true).unwrap();
        assert_eq!(a, make_splits(&samples, 0, 0.8, 5, true).unwrap());
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert_ne!(a[i].test, a[j].test, "repeats {i} and {j}");
            }
        }
    }

    #[test]
    fn per_sample_mode_splits_samples() {
        let samples = fake(5, 4);
        let s = &make_splits(&samples, 1, 0.8, 1, false).unwrap()[0];
        assert_eq!((s.train.len(), s.test.len()), (16, 4));
    }

    #[test]
    fn too_few_contents() {
        assert!(matches!(
            make_splits(&fake(4, 10), 0, 0.8, 5, true),
            Err(PfiqaError::TooFew { needed: 5, got: 4, .. })
        ));
    }
}
