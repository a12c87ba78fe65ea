//! Synthetic datasets with a controllable domain gap, disjoint splits and
//! teacher partitions, plus the PTNS tensor file format.

mod checkpoint;
mod csv_import;
mod partition;
mod ptns;
mod synth;

use std::io;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{NnError, Tensor};
use crate::seed::derive_rng;

pub use checkpoint::{load_source, save_source, SourceManifest};
pub use csv_import::import_csv;
pub use partition::{partition, PartitionPlan};
pub use ptns::{decode, encode, load_labels, load_tensor, save_labels, save_tensor, save_tensor_as, Dtype};
pub use synth::{generate, Family, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("cannot split {examples} examples among {teachers} teachers")]
    TooManyTeachers { teachers: usize, examples: usize },
    #[error("not a PTNS file (bad magic)")]
    BadMagic,
    #[error("unsupported PTNS version {0}")]
    VersionUnsupported(u16),
    #[error("unknown PTNS dtype {0}")]
    UnknownDtype(u8),
    #[error("payload checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("file truncated")]
    TruncatedFile,
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
    #[error("value out of range: {0}")]
    ValueOutOfRange(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Which pool a set of examples belongs to. Fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitId {
    /// Straight out of the generator, not yet split.
    Generated,
    /// Training half of a public task (the source task).
    Train,
    PrivateTrain,
    PublicPool,
    Test,
}

/// Fractions for the three-way target split; they must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub private: f64,
    pub public: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            private: 0.7,
            public: 0.2,
            test: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), DataError> {
        let parts = [self.private, self.public, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSpec(format!(
                "split fractions {parts:?} must be in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }
}

/// The three disjoint pools of a target task.
#[derive(Debug, Clone)]
pub struct TargetSplits {
    pub private: Dataset,
    pub public: Dataset,
    pub test: Dataset,
}

/// Images `N×C×H×W` with labels. `ids` index the generated parent set, which
/// makes split disjointness checkable.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: SplitId,
    provenance: String,
    ids: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, provenance: String) -> Result<Self, DataError> {
        if images.shape().len() != 4 {
            return Err(DataError::InvalidSpec(format!(
                "images must be N×C×H×W, got shape {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(DataError::InvalidSpec(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(DataError::ValueOutOfRange(format!("label {bad} with {classes} classes")));
        }
        let ids = (0..labels.len()).collect();
        Ok(Self {
            images,
            labels,
            classes,
            split: SplitId::Generated,
            provenance,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> SplitId {
        self.split
    }

    /// Hash of the generator spec this data came from.
    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `(C, H, W)` of one example.
    pub fn dims(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn example(&self, i: usize) -> Tensor {
        self.images.slice_outer(i)
    }

    pub fn examples(&self) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.example(i)).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// A subset keeping positions `rows` (in order) and tagged `split`.
    pub fn select(&self, rows: &[usize], split: SplitId) -> Dataset {
        let per = self.images.len() / self.len().max(1);
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(&self.images.data()[r * per..(r + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = rows.len();
        Dataset {
            images: Tensor::new(shape, data).expect("subset shape is consistent"),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
            split,
            provenance: self.provenance.clone(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
        }
    }

    fn shuffled_positions(&self, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut derive_rng(seed, "split", 0));
        order
    }

    /// Private / public / test pools from one seeded permutation.
    pub fn split_target(&self, fractions: &SplitFractions, seed: u64) -> Result<TargetSplits, DataError> {
        fractions.validate()?;
        let n = self.len();
        let order = self.shuffled_positions(seed);
        let n_private = (fractions.private * n as f64).round() as usize;
        let n_public = ((fractions.public * n as f64).round() as usize).min(n - n_private);
        let (private, rest) = order.split_at(n_private);
        let (public, test) = rest.split_at(n_public);
        Ok(TargetSplits {
            private: self.select(private, SplitId::PrivateTrain),
            public: self.select(public, SplitId::PublicPool),
            test: self.select(test, SplitId::Test),
        })
    }

    /// `(train, test)` with a `test_fraction` holdout.
    pub fn holdout(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(DataError::InvalidSpec(format!("holdout fraction {test_fraction} not in [0, 1)")));
        }
        let order = self.shuffled_positions(seed);
        let n_test = (test_fraction * self.len() as f64).round() as usize;
        let (test, train) = order.split_at(n_test);
        Ok((self.select(train, SplitId::Train), self.select(test, SplitId::Test)))
    }
}
