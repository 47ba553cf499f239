//! Recall@K over full-index rankings and within per-query candidate subsets.

use ndarray::ArrayView2;

use super::cases::QueryCase;
use super::index::{retrieve_among, EmbeddingIndex, Hit};
use crate::error::{Error, Result};

/// Fraction of cases whose ground truth appears in the first `k` entries of
/// its ranking. An empty case list scores 0.
pub fn recall_at_k(cases: &[QueryCase], rankings: &[Vec<Hit>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if cases.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, case) in cases.iter().enumerate() {
        let ranking = rankings.get(i).ok_or(Error::MissingRanking(i))?;
        if ranking.iter().take(k).any(|(id, _)| *id == case.gt_target_id) {
            hits += 1;
        }
    }
    Ok(hits as f64 / cases.len() as f64)
}

/// Subset rankings for each case: only that case's subset members are scored.
pub fn subset_rankings(
    cases: &[QueryCase],
    queries: ArrayView2<f64>,
    index: &EmbeddingIndex,
) -> Result<Vec<Vec<Hit>>> {
    if queries.nrows() != cases.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} query embeddings for {} cases",
            queries.nrows(),
            cases.len()
        )));
    }
    cases
        .iter()
        .enumerate()
        .map(|(i, case)| {
            let subset = case.subset.as_ref().ok_or_else(|| {
                Error::format("eval set", format!("case {i} has no candidate subset"))
            })?;
            if !subset.contains(&case.gt_target_id) {
                return Err(Error::GtNotInSubset {
                    case: i,
                    gt: case.gt_target_id.clone(),
                });
            }
            retrieve_among(queries.row(i), index, subset, subset.len())
        })
        .collect()
}

/// Recall@K where each case ranks only its own candidate subset.
pub fn recall_subset_at_k(
    cases: &[QueryCase],
    queries: ArrayView2<f64>,
    index: &EmbeddingIndex,
    k: usize,
) -> Result<f64> {
    let rankings = subset_rankings(cases, queries, index)?;
    recall_at_k(cases, &rankings, k)
}
