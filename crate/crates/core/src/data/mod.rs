//! Dataset ingestion, synthetic corpora, split protocol and preprocessing.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::config::{BenchmarkCounts, DatasetConfig, DatasetFormat};
use crate::datamodel::Sample;
use crate::error::{PfiqaError, Result};

pub mod manifest;
pub mod splits;
pub mod synth;
pub mod transform;

pub use manifest::{load_manifest, normalize_labels, parse_manifest, ManifestRecord};
pub use splits::{make_splits, Split};
pub use synth::synthesize_corpus;
pub use transform::{collate, crop_pair, eval_crop_offsets, eval_crops, sample_rng, train_transform, Batch, ModelInput};

/// Load the samples described by `spec`.
pub fn load_dataset(spec: &DatasetConfig) -> Result<Vec<Sample>> {
    match spec.format {
        DatasetFormat::Synthetic => synthesize_corpus(&spec.synthetic),
        format => {
            let root = spec
                .root
                .as_deref()
                .ok_or_else(|| PfiqaError::Config("dataset.root is required for file datasets".into()))?;
            load_manifest(root, &spec.manifest, format, spec.rank_one_is_best)
        }
    }
}

/// Counts of distinct contents, samples, methods and scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub contents: usize,
    pub samples: usize,
    pub methods: usize,
    pub scales: Vec<f64>,
}

impl DatasetSummary {
    pub fn of(samples: &[Sample]) -> Self {
        let contents: BTreeSet<&str> = samples.iter().map(|s| s.content_id.as_str()).collect();
        let methods: BTreeSet<&str> = samples.iter().map(|s| s.method_id.as_str()).collect();
        let mut scales: Vec<f64> = samples.iter().map(|s| s.scale_factor).collect();
        scales.sort_by(f64::total_cmp);
        scales.dedup();
        DatasetSummary {
            contents: contents.len(),
            samples: samples.len(),
            methods: methods.len(),
            scales,
        }
    }

    /// Whether the summary agrees with a published benchmark layout.
    /// Scales only need to be a subset of the published set.
    pub fn matches(&self, expected: &BenchmarkCounts) -> bool {
        self.contents == expected.contents
            && self.samples == expected.samples
            && self.methods == expected.methods
            && self.scales.iter().all(|s| expected.scales.iter().any(|e| f64::from(*e) == *s))
    }
}
