//! K-shot exemplar sampling under a fixed seed.
//!
//! Each class draws from its own ChaCha20 stream seeded with
//! `splitmix64(seed) ^ splitmix64(class_id + GOLDEN)`, so classes are
//! independent and a given `(seed, class)` selects the same images on every
//! platform. Candidates are sorted by `image_id` first; the draw is a partial
//! Fisher-Yates shuffle with rejection-sampled bounded integers.

use std::collections::BTreeMap;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::data_model::{ClassId, ExemplarSet, ImageRef, SpeciesVocabulary, TestItem, MAX_SHOTS};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SampleError {
    #[error("class {class_id} has {available} training images, {requested} requested")]
    InsufficientShots {
        class_id: ClassId,
        available: usize,
        requested: usize,
    },
    #[error("shot count {0} outside 1..={MAX_SHOTS}")]
    BadShotCount(usize),
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The generator used for `(seed, class)`.
pub fn class_rng(seed: u64, class_id: ClassId) -> ChaCha20Rng {
    let mixed = splitmix64(seed) ^ splitmix64(u64::from(class_id.0).wrapping_add(GOLDEN));
    ChaCha20Rng::seed_from_u64(mixed)
}

/// Uniform integer in `[0, bound)` by rejection on the top of the range.
pub fn bounded(rng: &mut impl RngCore, bound: u64) -> u64 {
    assert!(bound > 0);
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % bound;
        }
    }
}

/// Picks `m` of `items` uniformly without replacement. `items` must already be
/// in canonical order. Returned indices are in draw order.
pub fn draw_indices(rng: &mut impl RngCore, n: usize, m: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + bounded(rng, (n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(m);
    pool
}

/// One exemplar set per vocabulary class, `m` shots each, in class order.
/// Shots within a set are listed by `image_id`.
pub fn sample_few_shot(
    train_items: &[TestItem],
    vocab: &SpeciesVocabulary,
    m: usize,
    seed: u64,
) -> Result<Vec<ExemplarSet>, SampleError> {
    if m == 0 || m > MAX_SHOTS {
        return Err(SampleError::BadShotCount(m));
    }
    let mut by_class: BTreeMap<ClassId, Vec<&TestItem>> = BTreeMap::new();
    for item in train_items {
        by_class.entry(item.ground_truth).or_default().push(item);
    }
    vocab
        .class_ids()
        .map(|class_id| {
            let mut pool = by_class.remove(&class_id).unwrap_or_default();
            if pool.len() < m {
                return Err(SampleError::InsufficientShots {
                    class_id,
                    available: pool.len(),
                    requested: m,
                });
            }
            pool.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            let mut rng = class_rng(seed, class_id);
            let mut picked: Vec<&TestItem> = draw_indices(&mut rng, pool.len(), m)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            picked.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            Ok(ExemplarSet {
                class_id,
                m,
                shots: picked
                    .into_iter()
                    .map(|item| ImageRef {
                        image_id: item.image_id.clone(),
                        image_path: item.image_path.clone(),
                        resolved_path: item.resolved_path.clone(),
                    })
                    .collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::SpeciesRecord;
    use std::path::PathBuf;

    fn vocab(n: u32) -> SpeciesVocabulary {
        SpeciesVocabulary::new(
            "t",
            (0..n)
                .map(|i| SpeciesRecord {
                    class_id: ClassId(i),
                    scientific_name: format!("Genus s{i}"),
                    common_names: vec![],
                    taxonomy: vec![],
                })
                .collect(),
        )
        .unwrap()
    }

    fn items(class: u32, n: usize) -> Vec<TestItem> {
        (0..n)
            .map(|i| TestItem {
                image_id: format!("c{class}_{i:02}"),
                image_path: PathBuf::from(format!("img/c{class}_{i:02}.png")),
                ground_truth: ClassId(class),
                resolved_path: PathBuf::new(),
            })
            .collect()
    }

    fn ids(set: &ExemplarSet) -> Vec<String> {
        set.shots.iter().map(|s| s.image_id.clone()).collect()
    }

    #[test]
    fn forced_selection_when_exactly_m() {
        let v = vocab(2);
        let mut train = items(0, 4);
        train.extend(items(1, 4));
        for seed in [0, 1, 99] {
            let sets = sample_few_shot(&train, &v, 4, seed).unwrap();
            assert_eq!(ids(&sets[0]), vec!["c0_00", "c0_01", "c0_02", "c0_03"]);
            assert_eq!(sets[1].m, 4);
        }
    }

    #[test]
    fn insufficient_shots() {
        let v = vocab(2);
        let mut train = items(0, 20);
        train.extend(items(1, 3));
        assert_eq!(
            sample_few_shot(&train, &v, 4, 0).unwrap_err(),
            SampleError::InsufficientShots {
                class_id: ClassId(1),
                available: 3,
                requested: 4
            }
        );
        assert_eq!(
            sample_few_shot(&train, &v, 0, 0).unwrap_err(),
            SampleError::BadShotCount(0)
        );
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let v = vocab(2);
        let mut train = items(0, 20);
        train.extend(items(1, 20));
        let a = sample_few_shot(&train, &v, 8, 3).unwrap();
        let b = sample_few_shot(&train, &v, 8, 3).unwrap();
        assert_eq!(a, b);
        train.reverse();
        let c = sample_few_shot(&train, &v, 8, 3).unwrap();
        assert_eq!(a, c);
        let d = sample_few_shot(&train, &v, 8, 4).unwrap();
        assert_ne!(a, d);
    }

    /// Frozen selections: these must never change across platforms or
    /// releases, since published splits depend on them.
    #[test]
    fn frozen_selections() {
        let v = vocab(2);
        let mut train = items(0, 20);
        train.extend(items(1, 20));
        let got: Vec<Vec<String>> = (0..3)
            .map(|seed| ids(&sample_few_shot(&train, &v, 4, seed).unwrap()[0]))
            .collect();
        let frozen = [
            ["c0_00", "c0_10", "c0_18", "c0_19"],
            ["c0_00", "c0_02", "c0_09", "c0_18"],
            ["c0_00", "c0_01", "c0_03", "c0_15"],
        ];
        assert_eq!(got, frozen);
    }

    #[test]
    fn bounded_is_in_range() {
        let mut rng = class_rng(1, ClassId(2));
        for bound in [1u64, 2, 3, 7, 1 << 40] {
            for _ in 0..200 {
                assert!(bounded(&mut rng, bound) < bound);
            }
        }
    }
}
