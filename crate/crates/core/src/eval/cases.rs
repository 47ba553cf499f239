//! Query cases and the synthetic evaluation set.
//!
//! An eval set file is line-delimited JSON in the triplet dataset layout
//! (`ref_id`, `target_id`, `reformulation`, ...) with an optional `subset`
//! array of candidate ids per line.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::data::{index_by_id, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::triplets::{triplets_for_pairs, CaptionBackend, ReformulationBackend};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCase {
    pub ref_id: String,
    pub reformulation: String,
    #[serde(rename = "target_id", alias = "gt_target_id")]
    pub gt_target_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta_class: Option<String>,
}

impl QueryCase {
    pub fn validate(&self, case: usize) -> Result<()> {
        if let Some(subset) = &self.subset {
            if !subset.contains(&self.gt_target_id) {
                return Err(Error::GtNotInSubset {
                    case,
                    gt: self.gt_target_id.clone(),
                });
            }
            if subset.len() < 2 {
                return Err(Error::format("eval set", format!("case {case} subset has fewer than 2 ids")));
            }
        }
        Ok(())
    }
}

pub fn write_eval_set(path: &Path, cases: &[QueryCase]) -> Result<()> {
    artifact::write_atomic_with(path, |w| {
        for c in cases {
            serde_json::to_writer(&mut *w, c)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn read_eval_set(path: &Path) -> Result<Vec<QueryCase>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let case: QueryCase = serde_json::from_str(&line)
            .map_err(|e| Error::format("eval set", format!("line {}: {e}", n + 1)))?;
        case.validate(out.len())?;
        out.push(case);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSetConfig {
    /// Targets drawn per query-split image.
    pub cases_per_query: usize,
    /// Distractors added to the ground truth in each candidate subset.
    pub hard_negatives: usize,
    pub seed: u64,
}

impl Default for EvalSetConfig {
    fn default() -> Self {
        Self {
            cases_per_query: 2,
            hard_negatives: 5,
            seed: 0,
        }
    }
}

fn attribute_distance(a: &BTreeMap<String, String>, b: &BTreeMap<String, String>) -> usize {
    let mut d = a.iter().filter(|(k, v)| b.get(*k) != Some(*v)).count();
    d += b.keys().filter(|k| !a.contains_key(*k)).count();
    d
}

/// The `n` index images closest in attributes to `gt`, nearest first, ties by id.
pub fn hard_negatives<'a>(gt: &ImageRecord, pool: &[&'a ImageRecord], n: usize) -> Vec<&'a ImageRecord> {
    let mut ranked: Vec<(usize, &ImageRecord)> = pool
        .iter()
        .filter(|im| im.id != gt.id)
        .map(|im| (attribute_distance(&gt.attributes, &im.attributes), *im))
        .collect();
    ranked.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    ranked.into_iter().take(n).map(|(_, im)| im).collect()
}

/// References come from the query split, targets from the index split with
/// the same meta class, and each case's subset is the ground truth plus its
/// nearest index images by attribute distance.
pub fn build_eval_set(
    collection: &[ImageRecord],
    captioner: &dyn CaptionBackend,
    reformulator: &dyn ReformulationBackend,
    cfg: &EvalSetConfig,
    word_cap: usize,
) -> Result<Vec<QueryCase>> {
    if cfg.cases_per_query == 0 {
        return Err(Error::InvalidConfig("cases_per_query must be positive".into()));
    }
    let mut queries: Vec<&ImageRecord> = collection.iter().filter(|im| im.split == Split::Query).collect();
    let mut index: Vec<&ImageRecord> = collection.iter().filter(|im| im.split == Split::Index).collect();
    queries.sort_by(|a, b| a.id.cmp(&b.id));
    index.sort_by(|a, b| a.id.cmp(&b.id));
    if queries.is_empty() || index.is_empty() {
        return Err(Error::InvalidConfig(
            "collection needs both query-split and index-split images".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pairs = Vec::new();
    for q in &queries {
        let pool: Vec<&ImageRecord> = match &q.meta_class {
            Some(class) => index
                .iter()
                .filter(|im| im.meta_class.as_ref() == Some(class))
                .copied()
                .collect(),
            None => index.clone(),
        };
        if pool.is_empty() {
            continue;
        }
        let n = cfg.cases_per_query.min(pool.len());
        for i in sample(&mut rng, pool.len(), n) {
            pairs.push((q.id.clone(), pool[i].id.clone()));
        }
    }
    let triplets = triplets_for_pairs(collection, &pairs, captioner, reformulator, word_cap)?;
    let by_id = index_by_id(collection);
    triplets
        .triplets
        .into_iter()
        .map(|t| {
            let gt = &collection[by_id[t.target_id.as_str()]];
            let mut subset = vec![gt.id.clone()];
            subset.extend(hard_negatives(gt, &index, cfg.hard_negatives).iter().map(|im| im.id.clone()));
            Ok(QueryCase {
                meta_class: collection[by_id[t.ref_id.as_str()]].meta_class.clone(),
                ref_id: t.ref_id,
                reformulation: t.reformulation,
                gt_target_id: t.target_id,
                subset: Some(subset),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplets::{OracleCaptioner, OracleReformulator, DEFAULT_WORD_CAP};
    use crate::world::{generate_world, SyntheticWorldConfig};

    fn eval_set() -> (Vec<ImageRecord>, Vec<QueryCase>) {
        let world = SyntheticWorldConfig::default();
        let images = generate_world(&world).unwrap();
        let cap = OracleCaptioner::new(&world).unwrap();
        let reform = OracleReformulator::new(&world, DEFAULT_WORD_CAP).unwrap();
        let cases = build_eval_set(&images, &cap, &reform, &EvalSetConfig::default(), DEFAULT_WORD_CAP).unwrap();
        (images, cases)
    }

    #[test]
    fn cases_follow_split_and_class_rules() {
        let (images, cases) = eval_set();
        let by_id = index_by_id(&images);
        assert_eq!(cases.len(), 96 * 2);
        for (i, c) in cases.iter().enumerate() {
            c.validate(i).unwrap();
            let r = &images[by_id[c.ref_id.as_str()]];
            let t = &images[by_id[c.gt_target_id.as_str()]];
            assert_eq!(r.split, Split::Query);
            assert_eq!(t.split, Split::Index);
            assert_eq!(r.meta_class, t.meta_class);
            let subset = c.subset.as_ref().unwrap();
            assert_eq!(subset.len(), 6);
            for id in subset {
                assert_eq!(images[by_id[id.as_str()]].split, Split::Index);
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let (_, cases) = eval_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.jsonl");
        write_eval_set(&path, &cases).unwrap();
        assert_eq!(read_eval_set(&path).unwrap(), cases);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().contains("\"target_id\""));
    }

    #[test]
    fn nearest_negatives_first() {
        let (images, _) = eval_set();
        let pool: Vec<&ImageRecord> = images.iter().collect();
        let negs = hard_negatives(&images[0], &pool, 5);
        for n in &negs {
            assert_eq!(attribute_distance(&images[0].attributes, &n.attributes), 1);
        }
    }
}
