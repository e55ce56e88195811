//! Datasets, split manifests, composition-space masks, partial-label
//! masking, and deterministic batch iteration.

mod format;
mod synth;

pub use format::{load_features, read_features_str, write_features, write_features_str};
pub use synth::{generate_synthetic_world, FeasibilityMode, SyntheticWorldConfig};

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("record `{id}` has {got} feature values, expected {want}")]
    DimensionMismatch { id: String, got: usize, want: usize },
    #[error("pair ({state}, {object}) is out of range for {n_states} states x {n_objects} objects")]
    UnknownClass {
        state: usize,
        object: usize,
        n_states: usize,
        n_objects: usize,
    },
    #[error("pair ({0}, {1}) appears in both the seen and an unseen pair set")]
    OverlappingPairs(usize, usize),
    #[error("record `{0}` carries no label at all")]
    Unlabeled(String),
    #[error("split `{0}` has no records")]
    EmptySplit(Split),
    #[error("closed test space is empty")]
    EmptyClosedSpace,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Possibly partial (state, object) label. At least one side is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelPair {
    pub state: Option<usize>,
    pub object: Option<usize>,
}

impl LabelPair {
    pub fn full(state: usize, object: usize) -> Self {
        LabelPair {
            state: Some(state),
            object: Some(object),
        }
    }

    pub fn is_full(&self) -> bool {
        self.state.is_some() && self.object.is_some()
    }

    pub fn pair(&self) -> Option<(usize, usize)> {
        Some((self.state?, self.object?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub feature: Vec<f64>,
    pub label: LabelPair,
    pub split: Split,
}

/// Feature records plus the dataset's declared dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub dim: usize,
    pub records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Composition-space manifest: class names plus the seen and unseen pair
/// sets. Pairs are (state index, object index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub state_names: Vec<String>,
    pub object_names: Vec<String>,
    pub seen_pairs: BTreeSet<(usize, usize)>,
    pub val_unseen_pairs: BTreeSet<(usize, usize)>,
    pub test_unseen_pairs: BTreeSet<(usize, usize)>,
}

impl SplitManifest {
    pub fn n_states(&self) -> usize {
        self.state_names.len()
    }

    pub fn n_objects(&self) -> usize {
        self.object_names.len()
    }

    /// |states| x |objects|.
    pub fn full_space(&self) -> usize {
        self.n_states() * self.n_objects()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (ns, no) = (self.n_states(), self.n_objects());
        for &(s, o) in self
            .seen_pairs
            .iter()
            .chain(&self.val_unseen_pairs)
            .chain(&self.test_unseen_pairs)
        {
            if s >= ns || o >= no {
                return Err(DataError::UnknownClass {
                    state: s,
                    object: o,
                    n_states: ns,
                    n_objects: no,
                });
            }
        }
        for &(s, o) in &self.seen_pairs {
            if self.val_unseen_pairs.contains(&(s, o)) || self.test_unseen_pairs.contains(&(s, o))
            {
                return Err(DataError::OverlappingPairs(s, o));
            }
        }
        Ok(())
    }
}

/// Ratio between the full composition grid and the closed test-time space
/// (the seen pairs plus the test unseen pairs).
pub fn openworld_expansion_ratio(manifest: &SplitManifest) -> Result<f64, DataError> {
    let closed = manifest.seen_pairs.len() + manifest.test_unseen_pairs.len();
    if closed == 0 {
        return Err(DataError::EmptyClosedSpace);
    }
    Ok(manifest.full_space() as f64 / closed as f64)
}

/// Boolean grid over the |S| x |O| composition space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceMask {
    n_states: usize,
    n_objects: usize,
    bits: Vec<bool>,
}

impl SpaceMask {
    pub fn full(n_states: usize, n_objects: usize) -> Self {
        SpaceMask {
            n_states,
            n_objects,
            bits: vec![true; n_states * n_objects],
        }
    }

    pub fn empty(n_states: usize, n_objects: usize) -> Self {
        SpaceMask {
            n_states,
            n_objects,
            bits: vec![false; n_states * n_objects],
        }
    }

    pub fn from_pairs<'a>(
        n_states: usize,
        n_objects: usize,
        pairs: impl IntoIterator<Item = &'a (usize, usize)>,
    ) -> Self {
        let mut mask = SpaceMask::empty(n_states, n_objects);
        for &(s, o) in pairs {
            mask.bits[s * n_objects + o] = true;
        }
        mask
    }

    /// Closed world at test time: seen plus test-unseen pairs.
    pub fn closed_test(manifest: &SplitManifest) -> Self {
        Self::from_pairs(
            manifest.n_states(),
            manifest.n_objects(),
            manifest.seen_pairs.iter().chain(&manifest.test_unseen_pairs),
        )
    }

    /// Closed world during validation: seen plus val-unseen pairs.
    pub fn closed_val(manifest: &SplitManifest) -> Self {
        Self::from_pairs(
            manifest.n_states(),
            manifest.n_objects(),
            manifest.seen_pairs.iter().chain(&manifest.val_unseen_pairs),
        )
    }

    pub fn open(manifest: &SplitManifest) -> Self {
        Self::full(manifest.n_states(), manifest.n_objects())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn allows(&self, state: usize, object: usize) -> bool {
        self.bits[state * self.n_objects + object]
    }

    pub fn set(&mut self, state: usize, object: usize, allowed: bool) {
        self.bits[state * self.n_objects + object] = allowed;
    }

    pub fn count_allowed(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True if `other` allows everything this mask allows.
    pub fn subset_of(&self, other: &SpaceMask) -> bool {
        self.n_states == other.n_states
            && self.n_objects == other.n_objects
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }
}

/// Removes labels at random while guaranteeing every record keeps at least
/// one. Fractions are keep-probabilities; split membership is unchanged.
pub fn mask_partial_labels(
    dataset: &Dataset,
    keep_state_fraction: f64,
    keep_object_fraction: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    for (name, f) in [
        ("keep_state_fraction", keep_state_fraction),
        ("keep_object_fraction", keep_object_fraction),
    ] {
        if !(0.0..=1.0).contains(&f) {
            return Err(DataError::InvalidConfig(format!(
                "{name} must be in [0, 1], got {f}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    for rec in &mut out.records {
        let keep_s = rng.gen::<f64>() < keep_state_fraction;
        let keep_o = rng.gen::<f64>() < keep_object_fraction;
        let coin = rng.gen::<bool>();
        let mut state = rec.label.state.filter(|_| keep_s);
        let mut object = rec.label.object.filter(|_| keep_o);
        if state.is_none() && object.is_none() {
            // Restore one side; the coin only decides when both existed.
            match (rec.label.state, rec.label.object) {
                (Some(s), Some(o)) => {
                    if coin {
                        state = Some(s);
                    } else {
                        object = Some(o);
                    }
                }
                (Some(s), None) => state = Some(s),
                (None, Some(o)) => object = Some(o),
                (None, None) => return Err(DataError::Unlabeled(rec.id.clone())),
            }
        }
        rec.label = LabelPair { state, object };
    }
    Ok(out)
}

/// Splitmix-style mixer used to derive per-(seed, salt) RNG streams.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// One epoch's batches: a seeded shuffle of the split's record indices,
/// chunked by `batch_size` with the final short batch kept.
pub fn batch_iterator(
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size == 0 {
        return Err(DataError::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(DataError::EmptySplit(split));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch));
    indices.shuffle(&mut rng);
    Ok(indices.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
