use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backend::{caption, reformulate, word_count, CaptionBackend, CaptionRecord, ReformulationBackend};
use super::sampling::{sample_pairs, PairSamplingConfig};
use crate::artifact;
use crate::data::{index_by_id, ImageRecord};
use crate::error::{Error, Result};

/// One training example. Field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triplet {
    pub ref_id: String,
    pub target_id: String,
    pub reformulation: String,
    pub caption_ref: String,
    pub caption_target: String,
    /// (caption backend, reformulation backend)
    pub backend_ids: (String, String),
    pub pair_index: usize,
}

impl Triplet {
    pub fn validate(&self, word_cap: usize) -> Result<()> {
        if self.ref_id == self.target_id {
            return Err(Error::format("triplet", format!("ref == target `{}`", self.ref_id)));
        }
        let n = word_count(&self.reformulation);
        if n == 0 || n > word_cap {
            return Err(Error::format(
                "triplet",
                format!("pair {} reformulation has {n} words (cap {word_cap})", self.pair_index),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripletDataset {
    pub triplets: Vec<Triplet>,
}

impl TripletDataset {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// One JSON object per line, in `pair_index` order.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for t in &self.triplets {
            serde_json::to_writer(&mut out, t)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_jsonl()?;
        artifact::write_atomic_with(path, |w| w.write_all(&bytes))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut triplets = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                triplets.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { triplets })
    }

    /// Every referenced id exists in the collection.
    pub fn check_closure(&self, collection: &[ImageRecord]) -> Result<()> {
        let ids = index_by_id(collection);
        for t in &self.triplets {
            for id in [&t.ref_id, &t.target_id] {
                if !ids.contains_key(id.as_str()) {
                    return Err(Error::DanglingId(id.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Captions every image appearing in `pairs`, once each. Backend calls run on
/// the rayon pool; the result does not depend on completion order.
pub fn caption_images(
    collection: &[ImageRecord],
    pairs: &[(String, String)],
    backend: &dyn CaptionBackend,
) -> Result<HashMap<String, CaptionRecord>> {
    let by_id = index_by_id(collection);
    let needed: BTreeSet<&str> = pairs
        .iter()
        .flat_map(|(a, b)| [a.as_str(), b.as_str()])
        .collect();
    let needed: Vec<&str> = needed.into_iter().collect();
    let records = needed
        .par_iter()
        .map(|id| {
            let pos = by_id.get(id).ok_or_else(|| Error::DanglingId(id.to_string()))?;
            caption(&collection[*pos], backend)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(records.into_iter().map(|r| (r.image_id.clone(), r)).collect())
}

/// Turns sampled pairs into triplets, in pair order.
pub fn triplets_for_pairs(
    collection: &[ImageRecord],
    pairs: &[(String, String)],
    caption_backend: &dyn CaptionBackend,
    reform_backend: &dyn ReformulationBackend,
    word_cap: usize,
) -> Result<TripletDataset> {
    let captions = caption_images(collection, pairs, caption_backend)?;
    let triplets = pairs
        .par_iter()
        .enumerate()
        .map(|(pair_index, (a, b))| {
            let (ca, cb) = (&captions[a], &captions[b]);
            let text = reformulate(&ca.text, &cb.text, reform_backend, word_cap)?;
            Ok(Triplet {
                ref_id: a.clone(),
                target_id: b.clone(),
                reformulation: text,
                caption_ref: ca.text.clone(),
                caption_target: cb.text.clone(),
                backend_ids: (caption_backend.id().to_string(), reform_backend.id().to_string()),
                pair_index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TripletDataset { triplets })
}

pub fn build_dataset(
    collection: &[ImageRecord],
    sampling: &PairSamplingConfig,
    caption_backend: &dyn CaptionBackend,
    reform_backend: &dyn ReformulationBackend,
    word_cap: usize,
) -> Result<TripletDataset> {
    crate::data::validate_collection(collection)?;
    let pairs = sample_pairs(collection, sampling)?;
    triplets_for_pairs(collection, &pairs, caption_backend, reform_backend, word_cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplets::backend::{OracleCaptioner, OracleReformulator, DEFAULT_WORD_CAP};
    use crate::world::{generate_world, SyntheticWorldConfig};

    fn oracles(world: &SyntheticWorldConfig) -> (OracleCaptioner, OracleReformulator) {
        (
            OracleCaptioner::new(world).unwrap(),
            OracleReformulator::new(world, DEFAULT_WORD_CAP).unwrap(),
        )
    }

    #[test]
    fn single_pair_dataset_matches_captions() {
        let world_cfg = SyntheticWorldConfig::default();
        let world: Vec<_> = generate_world(&world_cfg).unwrap().into_iter().take(2).collect();
        let (cap, ref_) = oracles(&world_cfg);
        let sampling = PairSamplingConfig {
            n_pairs: 1,
            ..Default::default()
        };
        let ds = build_dataset(&world, &sampling, &cap, &ref_, 12).unwrap();
        assert_eq!(ds.len(), 1);
        let t = &ds.triplets[0];
        let by_id = index_by_id(&world);
        assert_eq!(t.caption_ref, caption(&world[by_id[t.ref_id.as_str()]], &cap).unwrap().text);
        assert_eq!(
            t.caption_target,
            caption(&world[by_id[t.target_id.as_str()]], &cap).unwrap().text
        );
        assert_eq!(t.pair_index, 0);
    }

    #[test]
    fn zero_pairs_rejected() {
        let world_cfg = SyntheticWorldConfig::default();
        let world = generate_world(&world_cfg).unwrap();
        let (cap, ref_) = oracles(&world_cfg);
        let sampling = PairSamplingConfig {
            n_pairs: 0,
            ..Default::default()
        };
        assert!(matches!(
            build_dataset(&world, &sampling, &cap, &ref_, 12),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn file_round_trip_and_key_order() {
        let world_cfg = SyntheticWorldConfig::default();
        let world = generate_world(&world_cfg).unwrap();
        let (cap, ref_) = oracles(&world_cfg);
        let sampling = PairSamplingConfig {
            n_pairs: 20,
            seed: 3,
            ..Default::default()
        };
        let ds = build_dataset(&world, &sampling, &cap, &ref_, 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("triplets.jsonl");
        ds.write(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        let keys = [
            "\"ref_id\"",
            "\"target_id\"",
            "\"reformulation\"",
            "\"caption_ref\"",
            "\"caption_target\"",
            "\"backend_ids\"",
            "\"pair_index\"",
        ];
        let positions: Vec<usize> = keys.iter().map(|k| first.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(TripletDataset::read(&path).unwrap(), ds);
        ds.check_closure(&world).unwrap();
        for t in &ds.triplets {
            t.validate(12).unwrap();
        }
    }
}
