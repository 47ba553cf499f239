//! Retrieval over a target-embedding index and Recall@K scoring.

pub mod cases;
pub mod gallery;
pub mod index;
pub mod metrics;
pub mod report;

pub use cases::{build_eval_set, read_eval_set, write_eval_set, EvalSetConfig, QueryCase};
pub use gallery::{export_gallery, render_gallery, GT_MISSING_MARKER};
pub use index::{retrieve, retrieve_among, retrieve_excluding, EmbeddingIndex, Hit};
pub use metrics::{recall_at_k, recall_subset_at_k, subset_rankings};
pub use report::{
    baseline_embed, build_index, evaluate, query_embeddings, AverageSpec, EmbedMode, EvalProtocol,
    EvalReport, ModeReport, QueryMode, RankedList,
};
