//! Zero-shot composed image retrieval.
//!
//! Triplets `(reference image, change text, target image)` are generated from
//! an unannotated collection by captioning both images and describing their
//! difference. A patch transformer conditioned on the change text through
//! cross-attention is trained with an in-batch contrastive loss against a
//! moving-average target encoder, and retrieval is scored with Recall@K.

pub mod artifact;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod nn;
pub mod text;
pub mod train;
pub mod triplets;
pub mod world;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{ImageRecord, Split};
pub use error::{Error, Result};
pub use eval::{EvalProtocol, EvalReport, QueryCase};
pub use model::ModelConfig;
pub use text::{TokenSequence, Tokenizer};
pub use train::{TrainConfig, TrainLog};
pub use world::SyntheticWorldConfig;
