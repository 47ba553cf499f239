//! Zero-shot triplet generation: sample image pairs, caption each image,
//! then describe the change from reference to target in a short text.

pub mod backend;
pub mod dataset;
pub mod http;
pub mod sampling;

pub use backend::{
    caption, reformulate, render_reformulation_prompt, CaptionBackend, CaptionRecord,
    OracleCaptioner, OracleReformulator, ReformulationBackend, CAPTION_PROMPT, DEFAULT_WORD_CAP,
};
pub use dataset::{build_dataset, triplets_for_pairs, Triplet, TripletDataset};
pub use http::{ChatClient, HttpBackendConfig, HttpCaptioner, HttpReformulator};
pub use sampling::{sample_pairs, PairSamplingConfig, PairStrategy};
