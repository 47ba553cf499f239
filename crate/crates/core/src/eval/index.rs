//! Exact cosine index over target embeddings.

use std::cmp::Ordering;
use std::collections::HashSet;

use ndarray::ArrayView1;

use crate::error::{Error, Result};
use crate::nn::Mat;

/// A retrieved candidate and its cosine score.
pub type Hit = (String, f64);

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    matrix: Mat,
    norms: Vec<f64>,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, matrix: Mat) -> Result<Self> {
        if ids.len() != matrix.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} ids for {} rows",
                ids.len(),
                matrix.nrows()
            )));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let mut norms = Vec::with_capacity(ids.len());
        for (i, row) in matrix.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroEmbedding(ids[i].clone()));
            }
            norms.push(n);
        }
        Ok(Self { ids, matrix, norms })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Cosine similarity of `query` to every row, clamped to [-1, 1].
    pub fn scores(&self, query: ArrayView1<f64>) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "query has {} dims, index {}",
                query.len(),
                self.dim()
            )));
        }
        let qn = query.dot(&query).sqrt();
        if qn == 0.0 || !qn.is_finite() {
            return Err(Error::ZeroEmbedding("<query>".into()));
        }
        let dots = self.matrix.dot(&query);
        Ok(dots
            .iter()
            .zip(&self.norms)
            .map(|(d, n)| (d / (qn * n)).clamp(-1.0, 1.0))
            .collect())
    }
}

/// Descending score, then ascending id.
pub(crate) fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

fn top_k(mut hits: Vec<Hit>, k: usize) -> Vec<Hit> {
    let k = k.min(hits.len());
    if k < hits.len() {
        hits.select_nth_unstable_by(k, rank_order);
        hits.truncate(k);
    }
    hits.sort_by(rank_order);
    hits
}

/// Top `min(k, N)` candidates by cosine similarity.
pub fn retrieve(query: ArrayView1<f64>, index: &EmbeddingIndex, k: usize) -> Result<Vec<Hit>> {
    retrieve_excluding(query, index, k, None)
}

/// As [`retrieve`], with one id removed from the candidate pool.
pub fn retrieve_excluding(
    query: ArrayView1<f64>,
    index: &EmbeddingIndex,
    k: usize,
    exclude: Option<&str>,
) -> Result<Vec<Hit>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let scores = index.scores(query)?;
    let hits = index
        .ids
        .iter()
        .zip(scores)
        .filter(|(id, _)| Some(id.as_str()) != exclude)
        .map(|(id, s)| (id.clone(), s))
        .collect();
    Ok(top_k(hits, k))
}

/// Ranks only the listed candidates.
pub fn retrieve_among(
    query: ArrayView1<f64>,
    index: &EmbeddingIndex,
    candidates: &[String],
    k: usize,
) -> Result<Vec<Hit>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let scores = index.scores(query)?;
    let mut seen = HashSet::new();
    let mut hits = Vec::with_capacity(candidates.len());
    for id in candidates {
        if !seen.insert(id.as_str()) {
            continue;
        }
        let pos = index
            .position(id)
            .ok_or_else(|| Error::DanglingId(id.clone()))?;
        hits.push((id.clone(), scores[pos]));
    }
    Ok(top_k(hits, k))
}
