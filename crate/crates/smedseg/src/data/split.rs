//! Deterministic subject-level train/validation splits.
//!
//! Splitting by subject (never by slice) prevents leakage of neighboring
//! slices across the split boundary.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub seed: u64,
}

impl SplitManifest {
    /// Checks disjointness and coverage against the full subject list.
    pub fn validate(&self, all_ids: &[String]) -> bool {
        use std::collections::BTreeSet;
        let train: BTreeSet<_> = self.train_ids.iter().collect();
        let val: BTreeSet<_> = self.val_ids.iter().collect();
        let all: BTreeSet<_> = all_ids.iter().collect();
        train.is_disjoint(&val)
            && train.union(&val).copied().collect::<BTreeSet<_>>() == all
            && train.len() + val.len() == all_ids.len()
    }
}

fn shuffled(ids: &[String], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out: Vec<String> = ids.to_vec();
    // Fisher-Yates, spelled out so the draw sequence is pinned by this crate
    // rather than by rand's shuffle internals.
    for i in (1..out.len()).rev() {
        let j = rng.random_range(0..=i);
        out.swap(i, j);
    }
    out
}

/// Deterministic shuffled 80/20 split by subject. Both sides are always
/// nonempty.
pub fn split_subjects(ids: &[String], seed: u64) -> Result<SplitManifest, DataError> {
    if ids.len() < 2 {
        return Err(DataError::TooFewSubjects(ids.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = shuffled(ids, &mut rng);
    let n_train = ((ids.len() as f64 * TRAIN_FRACTION).floor() as usize)
        .clamp(1, ids.len() - 1);
    Ok(SplitManifest {
        train_ids: order[..n_train].to_vec(),
        val_ids: order[n_train..].to_vec(),
        seed,
    })
}

/// Per-dataset variant: splits every named group 80/20 independently (with
/// a sub-seed derived per group) and concatenates the results, mirroring a
/// protocol where each source dataset keeps its own split.
pub fn split_subjects_grouped(
    groups: &[(String, Vec<String>)],
    seed: u64,
) -> Result<SplitManifest, DataError> {
    let mut train_ids = Vec::new();
    let mut val_ids = Vec::new();
    for (name, ids) in groups {
        let sub = split_subjects(ids, crate::derive_seed(seed, name))?;
        train_ids.extend(sub.train_ids);
        val_ids.extend(sub.val_ids);
    }
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(DataError::TooFewSubjects(train_ids.len() + val_ids.len()));
    }
    Ok(SplitManifest { train_ids, val_ids, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("subj_{i:03}")).collect()
    }

    #[test]
    fn ten_subjects_split_eight_two() {
        let m = split_subjects(&ids(10), 1).unwrap();
        assert_eq!(m.train_ids.len(), 8);
        assert_eq!(m.val_ids.len(), 2);
        assert!(m.validate(&ids(10)));
    }

    #[test]
    fn large_cohort_floor_arithmetic() {
        // 490 subjects -> floor(0.8 * 490) = 392 train, 98 validation.
        let m = split_subjects(&ids(490), 9).unwrap();
        assert_eq!(m.train_ids.len(), 392);
        assert_eq!(m.val_ids.len(), 98);
    }

    #[test]
    fn same_seed_same_split_different_seed_differs() {
        let a = split_subjects(&ids(50), 4).unwrap();
        let b = split_subjects(&ids(50), 4).unwrap();
        let c = split_subjects(&ids(50), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train_ids, c.train_ids);
    }

    #[test]
    fn no_subject_leaks_between_sides() {
        let m = split_subjects(&ids(33), 0).unwrap();
        for id in &m.train_ids {
            assert!(!m.val_ids.contains(id), "{id} leaked");
        }
    }

    #[test]
    fn two_subjects_is_the_minimum() {
        assert!(matches!(
            split_subjects(&ids(1), 0),
            Err(DataError::TooFewSubjects(1))
        ));
        let m = split_subjects(&ids(2), 0).unwrap();
        assert_eq!((m.train_ids.len(), m.val_ids.len()), (1, 1));
    }

    #[test]
    fn grouped_split_respects_group_boundaries() {
        let groups = vec![
            ("alpha".to_string(), ids(10)),
            ("beta".to_string(), (0..5).map(|i| format!("b_{i}")).collect()),
        ];
        let m = split_subjects_grouped(&groups, 3).unwrap();
        assert_eq!(m.train_ids.len(), 8 + 4);
        assert_eq!(m.val_ids.len(), 2 + 1);
        let all: Vec<String> = groups.iter().flat_map(|(_, v)| v.clone()).collect();
        assert!(m.validate(&all));
    }

    #[test]
    fn manifest_json_roundtrip() {
        let m = split_subjects(&ids(5), 2).unwrap();
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<SplitManifest>(&text).unwrap(), m);
    }
}
