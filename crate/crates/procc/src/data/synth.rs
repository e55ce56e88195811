//! Synthetic compositional worlds.
//!
//! Each state and object gets a random prototype vector; a sample for pair
//! (s, o) is `state_signal * proto_s + proto_o + sigma * noise`. Feasible
//! pairs are either a random subset of the grid or a constructed per-object
//! map (each object pairs with one seen state and one held-out unseen
//! state), which makes worlds where the object identity determines the
//! state and the features alone are state-ambiguous.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DataError, Dataset, FeatureRecord, LabelPair, SpaceMask, Split, SplitManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeasibilityMode {
    /// Every grid cell is feasible independently with `feasibility_density`.
    Random,
    /// Injective object-to-state map: each object gets exactly one seen state
    /// and one distinct unseen state. Density and seen_fraction are ignored.
    Bijection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorldConfig {
    pub n_states: usize,
    pub n_objects: usize,
    pub feature_dim: usize,
    /// Fraction of the grid that is feasible, in (0, 1]. Random mode only.
    pub feasibility_density: f64,
    /// Fraction of feasible pairs marked seen. Random mode only.
    pub seen_fraction: f64,
    pub samples_per_seen_pair: usize,
    pub noise_sigma: f64,
    /// Scale on the state prototype contribution; 0 makes features carry
    /// object identity only.
    pub state_signal: f64,
    pub feasibility: FeasibilityMode,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            n_states: 16,
            n_objects: 12,
            feature_dim: 64,
            feasibility_density: 0.3,
            seen_fraction: 0.6,
            samples_per_seen_pair: 30,
            noise_sigma: 0.25,
            state_signal: 1.0,
            feasibility: FeasibilityMode::Random,
            seed: 0,
        }
    }
}

impl SyntheticWorldConfig {
    fn validate(&self) -> Result<(), DataError> {
        if self.n_states == 0 || self.n_objects == 0 {
            return Err(DataError::InvalidConfig(
                "n_states and n_objects must be positive".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(DataError::InvalidConfig("feature_dim must be positive".into()));
        }
        if !(0.0 < self.feasibility_density && self.feasibility_density <= 1.0) {
            return Err(DataError::InvalidConfig(format!(
                "feasibility_density must be in (0, 1], got {}",
                self.feasibility_density
            )));
        }
        if !(0.0..=1.0).contains(&self.seen_fraction) {
            return Err(DataError::InvalidConfig(format!(
                "seen_fraction must be in [0, 1], got {}",
                self.seen_fraction
            )));
        }
        if self.samples_per_seen_pair == 0 {
            return Err(DataError::InvalidConfig(
                "samples_per_seen_pair must be >= 1".into(),
            ));
        }
        if self.noise_sigma < 0.0 || self.state_signal < 0.0 {
            return Err(DataError::InvalidConfig(
                "noise_sigma and state_signal must be non-negative".into(),
            ));
        }
        if self.feasibility == FeasibilityMode::Bijection && self.n_states < self.n_objects + 1 {
            return Err(DataError::InvalidConfig(format!(
                "bijection mode needs n_states > n_objects, got {} states for {} objects",
                self.n_states, self.n_objects
            )));
        }
        Ok(())
    }
}

/// Deterministic given the config seed: same config, bit-identical output.
pub fn generate_synthetic_world(
    config: &SyntheticWorldConfig,
) -> Result<(Dataset, SplitManifest, SpaceMask), DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.feature_dim;

    let gauss =
        |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| rng.sample(StandardNormal)).collect() };
    let state_protos: Vec<Vec<f64>> = (0..config.n_states).map(|_| gauss(&mut rng)).collect();
    let object_protos: Vec<Vec<f64>> = (0..config.n_objects).map(|_| gauss(&mut rng)).collect();

    let (seen, val_unseen, test_unseen, feasibility) = match config.feasibility {
        FeasibilityMode::Random => random_feasibility(config, &mut rng)?,
        FeasibilityMode::Bijection => bijection_feasibility(config, &mut rng)?,
    };

    let manifest = SplitManifest {
        state_names: (0..config.n_states).map(|i| format!("state{i:03}")).collect(),
        object_names: (0..config.n_objects).map(|i| format!("object{i:03}")).collect(),
        seen_pairs: seen.clone(),
        val_unseen_pairs: val_unseen.clone(),
        test_unseen_pairs: test_unseen.clone(),
    };
    manifest.validate()?;

    let eval_samples = config.samples_per_seen_pair.div_ceil(2);
    let mut records = Vec::new();
    let mut emit = |split: Split,
                    pairs: &BTreeSet<(usize, usize)>,
                    count: usize,
                    rng: &mut ChaCha8Rng| {
        for &(s, o) in pairs {
            for k in 0..count {
                let mut feature = Vec::with_capacity(d);
                for i in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    feature.push(
                        config.state_signal * state_protos[s][i]
                            + object_protos[o][i]
                            + config.noise_sigma * noise,
                    );
                }
                records.push(FeatureRecord {
                    id: format!("{split}-{s:03}-{o:03}-{k:04}"),
                    feature,
                    label: LabelPair::full(s, o),
                    split,
                });
            }
        }
    };

    emit(Split::Train, &seen, config.samples_per_seen_pair, &mut rng);
    let val_pairs: BTreeSet<_> = seen.union(&val_unseen).copied().collect();
    emit(Split::Val, &val_pairs, eval_samples, &mut rng);
    let test_pairs: BTreeSet<_> = seen.union(&test_unseen).copied().collect();
    emit(Split::Test, &test_pairs, eval_samples, &mut rng);

    Ok((Dataset { dim: d, records }, manifest, feasibility))
}

type PairSets = (
    BTreeSet<(usize, usize)>,
    BTreeSet<(usize, usize)>,
    BTreeSet<(usize, usize)>,
    SpaceMask,
);

fn random_feasibility(
    config: &SyntheticWorldConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairSets, DataError> {
    let mut feasible = Vec::new();
    let mut mask = SpaceMask::empty(config.n_states, config.n_objects);
    for s in 0..config.n_states {
        for o in 0..config.n_objects {
            if rng.gen::<f64>() < config.feasibility_density {
                feasible.push((s, o));
                mask.set(s, o, true);
            }
        }
    }
    if feasible.len() < 2 {
        return Err(DataError::InvalidConfig(format!(
            "only {} feasible pairs; need at least one seen and one unseen",
            feasible.len()
        )));
    }
    let n_seen = ((config.seen_fraction * feasible.len() as f64).round() as usize)
        .clamp(1, feasible.len());
    let n_unseen = feasible.len() - n_seen;
    if n_unseen < 1 {
        return Err(DataError::InvalidConfig(
            "configuration yields no unseen pairs; lower seen_fraction or raise density".into(),
        ));
    }
    feasible.shuffle(rng);
    let seen: BTreeSet<_> = feasible[..n_seen].iter().copied().collect();
    let unseen = &feasible[n_seen..];
    // Even split, extra pair to test.
    let n_val = n_unseen / 2;
    let val_unseen: BTreeSet<_> = unseen[..n_val].iter().copied().collect();
    let test_unseen: BTreeSet<_> = unseen[n_val..].iter().copied().collect();
    Ok((seen, val_unseen, test_unseen, mask))
}

fn bijection_feasibility(
    config: &SyntheticWorldConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairSets, DataError> {
    let mut states: Vec<usize> = (0..config.n_states).collect();
    states.shuffle(rng);
    let seen_state = &states[..config.n_objects];
    let mut seen = BTreeSet::new();
    let mut unseen = Vec::new();
    for o in 0..config.n_objects {
        seen.insert((seen_state[o], o));
        let alt = loop {
            let s = rng.gen_range(0..config.n_states);
            if s != seen_state[o] {
                break s;
            }
        };
        unseen.push((alt, o));
    }
    unseen.shuffle(rng);
    let n_val = unseen.len() / 2;
    let val_unseen: BTreeSet<_> = unseen[..n_val].iter().copied().collect();
    let test_unseen: BTreeSet<_> = unseen[n_val..].iter().copied().collect();
    let mut mask = SpaceMask::empty(config.n_states, config.n_objects);
    for &(s, o) in seen.iter().chain(&val_unseen).chain(&test_unseen) {
        mask.set(s, o, true);
    }
    Ok((seen, val_unseen, test_unseen, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = SyntheticWorldConfig {
            n_states: 6,
            n_objects: 5,
            feature_dim: 8,
            samples_per_seen_pair: 4,
            seed: 123,
            ..Default::default()
        };
        let (ds1, mf1, fs1) = generate_synthetic_world(&cfg).unwrap();
        let (ds2, mf2, fs2) = generate_synthetic_world(&cfg).unwrap();
        assert_eq!(mf1, mf2);
        assert_eq!(fs1, fs2);
        assert_eq!(ds1.records.len(), ds2.records.len());
        for (a, b) in ds1.records.iter().zip(&ds2.records) {
            assert_eq!(a.id, b.id);
            assert!(a
                .feature
                .iter()
                .zip(&b.feature)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn train_records_only_from_seen_pairs() {
        let cfg = SyntheticWorldConfig {
            n_states: 8,
            n_objects: 6,
            feature_dim: 4,
            samples_per_seen_pair: 3,
            seed: 5,
            ..Default::default()
        };
        let (ds, mf, _) = generate_synthetic_world(&cfg).unwrap();
        for rec in &ds.records {
            let pair = rec.label.pair().unwrap();
            match rec.split {
                Split::Train => assert!(mf.seen_pairs.contains(&pair)),
                Split::Val => assert!(
                    mf.seen_pairs.contains(&pair) || mf.val_unseen_pairs.contains(&pair)
                ),
                Split::Test => assert!(
                    mf.seen_pairs.contains(&pair) || mf.test_unseen_pairs.contains(&pair)
                ),
            }
        }
        assert!(!mf.val_unseen_pairs.is_empty() || !mf.test_unseen_pairs.is_empty());
    }

    #[test]
    fn no_unseen_pairs_is_an_error() {
        let cfg = SyntheticWorldConfig {
            n_states: 4,
            n_objects: 4,
            feature_dim: 4,
            feasibility_density: 1.0,
            seen_fraction: 1.0,
            seed: 1,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic_world(&cfg),
            Err(DataError::InvalidConfig(_))
        ));
    }

    #[test]
    fn bijection_mode_structure() {
        let cfg = SyntheticWorldConfig {
            n_states: 16,
            n_objects: 12,
            feature_dim: 8,
            samples_per_seen_pair: 2,
            state_signal: 0.0,
            feasibility: FeasibilityMode::Bijection,
            seed: 9,
            ..Default::default()
        };
        let (_, mf, mask) = generate_synthetic_world(&cfg).unwrap();
        assert_eq!(mf.seen_pairs.len(), 12);
        assert_eq!(mf.val_unseen_pairs.len() + mf.test_unseen_pairs.len(), 12);
        // Each object appears in exactly one seen pair and one unseen pair.
        for o in 0..12 {
            assert_eq!(mf.seen_pairs.iter().filter(|&&(_, po)| po == o).count(), 1);
            let unseen = mf
                .val_unseen_pairs
                .iter()
                .chain(&mf.test_unseen_pairs)
                .filter(|&&(_, po)| po == o)
                .count();
            assert_eq!(unseen, 1);
        }
        // Seen states are distinct across objects.
        let seen_states: BTreeSet<usize> = mf.seen_pairs.iter().map(|&(s, _)| s).collect();
        assert_eq!(seen_states.len(), 12);
        assert_eq!(mask.count_allowed(), 24);
    }

    #[test]
    fn utzappos_scale_template() {
        let cfg = SyntheticWorldConfig {
            n_states: 16,
            n_objects: 12,
            feature_dim: 8,
            feasibility_density: 0.65,
            seen_fraction: 0.67,
            samples_per_seen_pair: 2,
            seed: 77,
            ..Default::default()
        };
        let (_, mf, _) = generate_synthetic_world(&cfg).unwrap();
        assert_eq!(mf.full_space(), 192);
        assert!(mf.seen_pairs.len() > 50, "seen {}", mf.seen_pairs.len());
    }
}
