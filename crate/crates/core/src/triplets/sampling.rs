use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    SameMetaClass,
    GlobalRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairSamplingConfig {
    pub strategy: PairStrategy,
    pub n_pairs: usize,
    pub seed: u64,
    pub dedupe: bool,
}

impl Default for PairSamplingConfig {
    fn default() -> Self {
        Self {
            strategy: PairStrategy::SameMetaClass,
            n_pairs: 2000,
            seed: 0,
            dedupe: true,
        }
    }
}

/// Groups of collection positions that pairs may be drawn within.
fn pools(collection: &[ImageRecord], strategy: PairStrategy) -> Result<Vec<Vec<usize>>> {
    match strategy {
        PairStrategy::GlobalRandom => Ok(vec![(0..collection.len()).collect()]),
        PairStrategy::SameMetaClass => {
            let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, im) in collection.iter().enumerate() {
                let class = im
                    .meta_class
                    .as_deref()
                    .ok_or_else(|| Error::MissingMetaClass(im.id.clone()))?;
                classes.entry(class).or_default().push(i);
            }
            Ok(classes.into_values().collect())
        }
    }
}

/// Maps a flat index over all ordered distinct pairs of the pools to a pair.
fn decode_pair(pools: &[Vec<usize>], mut flat: usize) -> (usize, usize) {
    for pool in pools {
        let n = pool.len();
        let count = n * n.saturating_sub(1);
        if flat < count {
            let a = flat / (n - 1);
            let r = flat % (n - 1);
            let b = if r < a { r } else { r + 1 };
            return (pool[a], pool[b]);
        }
        flat -= count;
    }
    unreachable!("flat pair index out of range")
}

/// Draws ordered `(ref, target)` pairs; `(a, b)` and `(b, a)` are distinct.
pub fn sample_pairs(
    collection: &[ImageRecord],
    cfg: &PairSamplingConfig,
) -> Result<Vec<(String, String)>> {
    if cfg.n_pairs == 0 {
        return Err(Error::InvalidConfig("n_pairs must be > 0".into()));
    }
    if collection.len() < 2 {
        return Err(Error::InsufficientPairs {
            requested: cfg.n_pairs,
            available: 0,
        });
    }
    let pools = pools(collection, cfg.strategy)?;
    let available: usize = pools.iter().map(|p| p.len() * p.len().saturating_sub(1)).sum();
    if available == 0 || (cfg.dedupe && cfg.n_pairs > available) {
        return Err(Error::InsufficientPairs {
            requested: cfg.n_pairs,
            available,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut flat: Vec<usize> = if cfg.dedupe {
        rand::seq::index::sample(&mut rng, available, cfg.n_pairs).into_vec()
    } else {
        (0..cfg.n_pairs).map(|_| rng.random_range(0..available)).collect()
    };
    flat.shuffle(&mut rng);

    let pairs: Vec<(String, String)> = flat
        .into_iter()
        .map(|f| {
            let (a, b) = decode_pair(&pools, f);
            (collection[a].id.clone(), collection[b].id.clone())
        })
        .collect();
    debug_assert!(!cfg.dedupe || pairs.iter().collect::<HashSet<_>>().len() == pairs.len());
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::world::{generate_world, SyntheticWorldConfig};
    use ndarray::Array3;

    fn img(id: &str, class: Option<&str>) -> ImageRecord {
        let mut im = ImageRecord::new(id, Array3::zeros((2, 2, 1)), Split::Index).unwrap();
        im.meta_class = class.map(String::from);
        im
    }

    fn cfg(strategy: PairStrategy, n_pairs: usize) -> PairSamplingConfig {
        PairSamplingConfig {
            strategy,
            n_pairs,
            seed: 1,
            dedupe: true,
        }
    }

    #[test]
    fn two_images_yield_both_orders() {
        let coll = [img("a", None), img("b", None)];
        let mut pairs = sample_pairs(&coll, &cfg(PairStrategy::GlobalRandom, 2)).unwrap();
        pairs.sort();
        assert_eq!(
            pairs,
            vec![("a".into(), "b".into()), ("b".into(), "a".into())]
        );
    }

    #[test]
    fn same_class_counts_only_within_class_pairs() {
        let coll = [img("a", Some("dress")), img("b", Some("dress")), img("c", Some("tops"))];
        let err = sample_pairs(&coll, &cfg(PairStrategy::SameMetaClass, 3)).unwrap_err();
        assert!(matches!(err, Error::InsufficientPairs { requested: 3, available: 2 }));
        let ok = sample_pairs(&coll, &cfg(PairStrategy::SameMetaClass, 2)).unwrap();
        assert!(ok.iter().all(|(a, b)| a != "c" && b != "c"));
    }

    #[test]
    fn missing_meta_class_is_reported() {
        let coll = [img("a", Some("dress")), img("b", None)];
        assert!(matches!(
            sample_pairs(&coll, &cfg(PairStrategy::SameMetaClass, 1)),
            Err(Error::MissingMetaClass(id)) if id == "b"
        ));
    }

    #[test]
    fn zero_pairs_is_invalid() {
        let coll = [img("a", None), img("b", None)];
        assert!(matches!(
            sample_pairs(&coll, &cfg(PairStrategy::GlobalRandom, 0)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn seeded_runs_repeat_and_respect_classes() {
        let world = generate_world(&SyntheticWorldConfig {
            sample: Some(100),
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let c = PairSamplingConfig {
            seed: 7,
            n_pairs: 50,
            ..Default::default()
        };
        let a = sample_pairs(&world, &c).unwrap();
        assert_eq!(a, sample_pairs(&world, &c).unwrap());
        assert_eq!(a.len(), 50);
        let by_id = crate::data::index_by_id(&world);
        for (r, t) in &a {
            assert_ne!(r, t);
            assert_eq!(world[by_id[r.as_str()]].meta_class, world[by_id[t.as_str()]].meta_class);
        }
    }

    #[test]
    fn without_dedupe_can_exceed_distinct_pairs() {
        let coll = [img("a", None), img("b", None)];
        let c = PairSamplingConfig {
            dedupe: false,
            ..cfg(PairStrategy::GlobalRandom, 5)
        };
        let pairs = sample_pairs(&coll, &c).unwrap();
        assert_eq!(pairs.len(), 5);
        assert!(pairs.iter().all(|(a, b)| a != b));
    }
}
