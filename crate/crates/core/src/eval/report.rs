//! Query embeddings per mode, the evaluation driver and its report.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::cases::QueryCase;
use super::index::{retrieve_excluding, EmbeddingIndex, Hit};
use super::metrics::{recall_at_k, subset_rankings};
use crate::artifact;
use crate::checkpoint::Checkpoint;
use crate::data::{index_by_id, ImageRecord, Split};
use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::train::{fuse_rows, normalize_rows};

/// How a query is embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QueryMode {
    /// Network output for (reference image, change text).
    #[serde(rename = "e_r")]
    Reformulated,
    /// `λ e_r + (1 - λ) pooled text`.
    #[serde(rename = "e_f")]
    Fused,
    #[serde(rename = "image_only")]
    ImageOnly,
    #[serde(rename = "text_only")]
    TextOnly,
    /// Sum of the unit-normalized image-only and text-only vectors.
    #[serde(rename = "sum")]
    Sum,
}

impl QueryMode {
    pub const ALL: [QueryMode; 5] = [
        QueryMode::Reformulated,
        QueryMode::Fused,
        QueryMode::ImageOnly,
        QueryMode::TextOnly,
        QueryMode::Sum,
    ];

    pub fn label(self) -> &'static str {
        match self {
            QueryMode::Reformulated => "e_r",
            QueryMode::Fused => "e_f",
            QueryMode::ImageOnly => "image_only",
            QueryMode::TextOnly => "text_only",
            QueryMode::Sum => "sum",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    ModelTarget,
    /// The target path of the same checkpoint; the single-modality
    /// baselines are scored against the same gallery as the model.
    ImageOnlyBaseline,
}

/// Index over `images`, one row per image from the target path (null text,
/// online parameters).
pub fn build_index(images: &[&ImageRecord], ckpt: &Checkpoint, mode: EmbedMode) -> Result<EmbeddingIndex> {
    if images.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let matrix = match mode {
        EmbedMode::ModelTarget | EmbedMode::ImageOnlyBaseline => ckpt.embed_targets(images, false)?,
    };
    EmbeddingIndex::new(images.iter().map(|im| im.id.clone()).collect(), matrix)
}

fn resolve<'a>(cases: &[QueryCase], collection: &'a [ImageRecord]) -> Result<Vec<&'a ImageRecord>> {
    let by_id = index_by_id(collection);
    cases
        .iter()
        .map(|c| {
            by_id
                .get(c.ref_id.as_str())
                .map(|&i| &collection[i])
                .ok_or_else(|| Error::DanglingId(c.ref_id.clone()))
        })
        .collect()
}

/// Query embeddings of every case under `mode`; `lambda` is used by `Fused`.
pub fn query_embeddings(
    ckpt: &Checkpoint,
    cases: &[QueryCase],
    collection: &[ImageRecord],
    mode: QueryMode,
    lambda: f64,
) -> Result<Mat> {
    let refs = resolve(cases, collection)?;
    let texts: Vec<&str> = cases.iter().map(|c| c.reformulation.as_str()).collect();
    match mode {
        QueryMode::Reformulated => ckpt.embed_queries(&refs, &texts),
        QueryMode::Fused => fuse_rows(&ckpt.embed_queries(&refs, &texts)?, &ckpt.text_pooled(&texts)?, lambda),
        QueryMode::ImageOnly => ckpt.embed_targets(&refs, false),
        QueryMode::TextOnly => ckpt.text_pooled(&texts),
        QueryMode::Sum => {
            let (img, _) = normalize_rows(&ckpt.embed_targets(&refs, false)?)?;
            let (txt, _) = normalize_rows(&ckpt.text_pooled(&texts)?)?;
            Ok(img + txt)
        }
    }
}

/// Single-case baseline query vector (`ImageOnly`, `TextOnly` or `Sum`).
pub fn baseline_embed(
    case: &QueryCase,
    ckpt: &Checkpoint,
    collection: &[ImageRecord],
    mode: QueryMode,
) -> Result<Array1<f64>> {
    if !matches!(mode, QueryMode::ImageOnly | QueryMode::TextOnly | QueryMode::Sum) {
        return Err(Error::InvalidConfig(format!("`{}` is not a baseline mode", mode.label())));
    }
    let m = query_embeddings(ckpt, std::slice::from_ref(case), collection, mode, ckpt.lambda)?;
    Ok(m.row(0).to_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageSpec {
    pub name: String,
    pub metrics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub ks: Vec<usize>,
    pub subset_ks: Vec<usize>,
    pub averages: Vec<AverageSpec>,
    pub modes: Vec<QueryMode>,
    /// Keep each reference image in its own candidate pool.
    pub include_reference: bool,
    pub per_meta_class: bool,
    /// Ranked lists kept in the report, `0` for none.
    pub ranking_depth: usize,
    /// λ for the fused mode; the checkpoint's value when unset.
    pub lambda: Option<f64>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10, 50],
            subset_ks: vec![1, 2, 3],
            averages: vec![
                AverageSpec {
                    name: "Avg(R@10,R@50)".into(),
                    metrics: vec!["R@10".into(), "R@50".into()],
                },
                AverageSpec {
                    name: "Avg(R@5,Rs@1)".into(),
                    metrics: vec!["R@5".into(), "Rs@1".into()],
                },
            ],
            modes: QueryMode::ALL.to_vec(),
            include_reference: false,
            per_meta_class: true,
            ranking_depth: 10,
            lambda: None,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.iter().chain(&self.subset_ks).any(|&k| k == 0) {
            return Err(Error::InvalidConfig("recall cut-offs must be non-empty and positive".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::InvalidConfig("no query modes selected".into()));
        }
        if let Some(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::LambdaOutOfRange(l));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub ref_id: String,
    pub reformulation: String,
    pub gt_target_id: String,
    /// Rank of the ground truth (1-based) in the full candidate pool.
    pub gt_rank: Option<usize>,
    pub hits: Vec<Hit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: QueryMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Fractions in [0, 1], keyed `R@K`, `Rs@K` and average names.
    pub metrics: BTreeMap<String, f64>,
    /// The same values as percentages rounded to two decimals.
    pub percent: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_meta_class: BTreeMap<String, BTreeMap<String, f64>>,
    /// Uniform mean over meta classes.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta_class_mean: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rankings: Option<Vec<RankedList>>,
}

impl ModeReport {
    /// Metrics and ranked lists, ignoring which mode produced them.
    pub fn same_results(&self, other: &ModeReport) -> bool {
        self.metrics == other.metrics
            && self.per_meta_class == other.per_meta_class
            && self.rankings == other.rankings
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_hash: String,
    pub eval_set_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub n_cases: usize,
    pub n_index: usize,
    pub include_reference: bool,
    pub modes: Vec<ModeReport>,
}

impl EvalReport {
    pub fn mode(&self, mode: QueryMode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn metric(&self, mode: QueryMode, name: &str) -> Option<f64> {
        self.mode(mode).and_then(|m| m.metrics.get(name).copied())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        artifact::write_json_atomic(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        artifact::read_json(path)
    }

    /// Markdown table of percentages, one row per mode.
    pub fn to_markdown(&self) -> String {
        let Some(first) = self.modes.first() else {
            return String::new();
        };
        let names: Vec<&String> = first.percent.keys().collect();
        let mut out = format!("| mode | {} |\n", names.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" | "));
        out.push_str(&format!("|---|{}\n", "---|".repeat(names.len())));
        for m in &self.modes {
            let cells: Vec<String> = names
                .iter()
                .map(|n| m.percent.get(*n).map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()))
                .collect();
            out.push_str(&format!("| {} | {} |\n", m.mode.label(), cells.join(" | ")));
        }
        out
    }
}

fn round2(percent: f64) -> f64 {
    (percent * 100.0).round() / 100.0
}

fn metric_table(
    cases: &[QueryCase],
    full: &[Vec<Hit>],
    subset: Option<&[Vec<Hit>]>,
    protocol: &EvalProtocol,
) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    for &k in &protocol.ks {
        m.insert(format!("R@{k}"), recall_at_k(cases, full, k)?);
    }
    if let Some(sub) = subset {
        for &k in &protocol.subset_ks {
            m.insert(format!("Rs@{k}"), recall_at_k(cases, sub, k)?);
        }
    }
    for avg in &protocol.averages {
        let parts: Option<Vec<f64>> = avg.metrics.iter().map(|n| m.get(n).copied()).collect();
        if let Some(parts) = parts.filter(|p| !p.is_empty()) {
            m.insert(avg.name.clone(), parts.iter().sum::<f64>() / parts.len() as f64);
        }
    }
    Ok(m)
}

/// Scores every configured query mode against one shared index of all
/// non-query images in `collection`.
pub fn evaluate(
    ckpt: &Checkpoint,
    collection: &[ImageRecord],
    cases: &[QueryCase],
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    protocol.validate()?;
    for (i, c) in cases.iter().enumerate() {
        c.validate(i)?;
    }
    let mut pool: Vec<&ImageRecord> = collection.iter().filter(|im| im.split != Split::Query).collect();
    if protocol.include_reference {
        let by_id = index_by_id(collection);
        for c in cases {
            if let Some(&i) = by_id.get(c.ref_id.as_str()) {
                if collection[i].split == Split::Query && !pool.iter().any(|im| im.id == c.ref_id) {
                    pool.push(&collection[i]);
                }
            }
        }
    }
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    let index = build_index(&pool, ckpt, EmbedMode::ModelTarget)?;
    for c in cases {
        if index.position(&c.gt_target_id).is_none() {
            return Err(Error::DanglingId(c.gt_target_id.clone()));
        }
    }
    let has_subsets = !cases.is_empty() && cases.iter().all(|c| c.subset.is_some());
    let lambda = protocol.lambda.unwrap_or(ckpt.lambda);

    let mut modes = protocol.modes.clone();
    modes.sort();
    modes.dedup();
    let mut reports = Vec::with_capacity(modes.len());
    for mode in modes {
        let q = query_embeddings(ckpt, cases, collection, mode, lambda)?;
        let mut full = Vec::with_capacity(cases.len());
        let mut gt_ranks = Vec::with_capacity(cases.len());
        for (i, c) in cases.iter().enumerate() {
            let exclude = (!protocol.include_reference).then_some(c.ref_id.as_str());
            let ranked = retrieve_excluding(q.row(i), &index, index.len(), exclude)?;
            gt_ranks.push(ranked.iter().position(|(id, _)| *id == c.gt_target_id).map(|p| p + 1));
            full.push(ranked);
        }
        let subset = if has_subsets {
            Some(subset_rankings(cases, q.view(), &index)?)
        } else {
            None
        };
        let metrics = metric_table(cases, &full, subset.as_deref(), protocol)?;

        let mut per_meta_class = BTreeMap::new();
        let mut meta_class_mean = BTreeMap::new();
        if protocol.per_meta_class {
            let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, c) in cases.iter().enumerate() {
                if let Some(class) = &c.meta_class {
                    groups.entry(class.clone()).or_default().push(i);
                }
            }
            for (class, idx) in &groups {
                let cs: Vec<QueryCase> = idx.iter().map(|&i| cases[i].clone()).collect();
                let fr: Vec<Vec<Hit>> = idx.iter().map(|&i| full[i].clone()).collect();
                let sr: Option<Vec<Vec<Hit>>> = subset
                    .as_ref()
                    .map(|s| idx.iter().map(|&i| s[i].clone()).collect());
                per_meta_class.insert(class.clone(), metric_table(&cs, &fr, sr.as_deref(), protocol)?);
            }
            if !groups.is_empty() {
                for name in metrics.keys() {
                    let vals: Vec<f64> = per_meta_class.values().filter_map(|m| m.get(name).copied()).collect();
                    meta_class_mean.insert(name.clone(), vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
        }
        let rankings = (protocol.ranking_depth > 0).then(|| {
            cases
                .iter()
                .zip(&full)
                .zip(&gt_ranks)
                .map(|((c, r), rank)| RankedList {
                    ref_id: c.ref_id.clone(),
                    reformulation: c.reformulation.clone(),
                    gt_target_id: c.gt_target_id.clone(),
                    gt_rank: *rank,
                    hits: r.iter().take(protocol.ranking_depth).cloned().collect(),
                })
                .collect()
        });
        reports.push(ModeReport {
            mode,
            lambda: (mode == QueryMode::Fused).then_some(lambda),
            percent: metrics.iter().map(|(k, v)| (k.clone(), round2(v * 100.0))).collect(),
            metrics,
            per_meta_class,
            meta_class_mean,
            rankings,
        });
    }

    let cases_json = serde_json::to_vec(cases)?;
    Ok(EvalReport {
        checkpoint_hash: ckpt.backbone_hash(),
        eval_set_hash: artifact::sha256_hex(&cases_json),
        config_hash: None,
        n_cases: cases.len(),
        n_index: index.len(),
        include_reference: protocol.include_reference,
        modes: reports,
    })
}

