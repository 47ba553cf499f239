//! Model state, the embedding entry points used by training and retrieval,
//! and the on-disk checkpoint format.
//!
//! File layout: the 8-byte magic `ZSCIRCK1`, a little-endian `u64` header
//! length, the JSON header, then every array as raw little-endian `f64` in
//! header order. Values are stored bit-exactly.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::model::{forward_batch, patchify, ModelConfig, Network, TargetNetwork};
use crate::nn::{Mat, Params};
use crate::text::{TokenSequence, Tokenizer};

const MAGIC: &[u8; 8] = b"ZSCIRCK1";
pub const FORMAT_VERSION: u32 = 1;

/// Images per forward pass when embedding large collections.
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub online: Network,
    pub target: TargetNetwork,
    pub tau: f64,
    pub lambda: f64,
    pub step: u64,
}

impl Checkpoint {
    /// Fresh initialization; the target copy starts equal to the online weights.
    pub fn init(config: &ModelConfig, tokenizer: Tokenizer) -> Result<Self> {
        let mut config = config.clone();
        if config.text_vocab_size == 0 {
            config.text_vocab_size = tokenizer.vocab_size();
        } else if config.text_vocab_size != tokenizer.vocab_size() {
            return Err(Error::InvalidConfig(format!(
                "text_vocab_size {} but tokenizer has {} words",
                config.text_vocab_size,
                tokenizer.vocab_size()
            )));
        }
        config.validate()?;
        let online = Network::new(&config)?;
        let target = online.target_copy();
        Ok(Self {
            tau: config.temperature_init,
            lambda: config.lambda_init,
            config,
            tokenizer,
            online,
            target,
            step: 0,
        })
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        self.tokenizer.encode(text, self.config.max_text_len)
    }

    pub fn null_tokens(&self) -> TokenSequence {
        TokenSequence::new(vec![self.config.null_token_id])
    }

    /// Query embeddings `e_r` for (image, text) pairs, online parameters.
    pub fn embed_queries(&self, images: &[&ImageRecord], texts: &[&str]) -> Result<Mat> {
        let seqs: Vec<TokenSequence> = texts.iter().map(|t| self.tokenize(t)).collect();
        self.embed_with(images, &seqs, false)
    }

    /// Target embeddings `e_t` (null text); moving-average parameters when `use_ema`.
    pub fn embed_targets(&self, images: &[&ImageRecord], use_ema: bool) -> Result<Mat> {
        let seqs = vec![self.null_tokens(); images.len()];
        self.embed_with(images, &seqs, use_ema)
    }

    pub fn embed_with(&self, images: &[&ImageRecord], seqs: &[TokenSequence], use_ema: bool) -> Result<Mat> {
        if images.len() != seqs.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} images, {} texts",
                images.len(),
                seqs.len()
            )));
        }
        let (visual, predictor) = if use_ema {
            (&self.target.visual, &self.target.predictor)
        } else {
            (&self.online.visual, &self.online.predictor)
        };
        let d = self.config.d_model;
        let mut out = Mat::zeros((images.len(), d));
        for (chunk, (ims, sq)) in images
            .chunks(EMBED_CHUNK)
            .zip(seqs.chunks(EMBED_CHUNK))
            .enumerate()
        {
            let patches = patchify(&self.config, ims)?;
            let refs: Vec<&TokenSequence> = sq.iter().collect();
            let (e, _) = forward_batch(&self.config, visual, predictor, &self.online.text, patches, &refs)?;
            out.slice_mut(ndarray::s![chunk * EMBED_CHUNK..chunk * EMBED_CHUNK + ims.len(), ..])
                .assign(&e);
        }
        Ok(out)
    }

    /// Pooled text vectors (online text encoder).
    pub fn text_pooled(&self, texts: &[&str]) -> Result<Mat> {
        let seqs: Vec<TokenSequence> = texts.iter().map(|t| self.tokenize(t)).collect();
        let mut out = Mat::zeros((texts.len(), self.config.d_model));
        for (chunk, sq) in seqs.chunks(EMBED_CHUNK).enumerate() {
            let refs: Vec<&TokenSequence> = sq.iter().collect();
            let (tout, _) = self.online.text.forward(&self.config, &refs)?;
            out.slice_mut(ndarray::s![chunk * EMBED_CHUNK..chunk * EMBED_CHUNK + sq.len(), ..])
                .assign(&tout.pooled);
        }
        Ok(out)
    }

    pub fn embed_query(&self, image: &ImageRecord, text: &str) -> Result<Array1<f64>> {
        Ok(self.embed_queries(&[image], &[text])?.row(0).to_owned())
    }

    pub fn embed_target(&self, image: &ImageRecord, use_ema: bool) -> Result<Array1<f64>> {
        Ok(self.embed_targets(&[image], use_ema)?.row(0).to_owned())
    }

    /// Hash of everything except `lambda`.
    pub fn backbone_hash(&self) -> String {
        let mut hasher_input = crate::model::params_hash(&self.online);
        hasher_input.push_str(&crate::model::params_hash(&self.target));
        hasher_input.push_str(&format!("{:x}", self.tau.to_bits()));
        artifact::sha256_hex(hasher_input.as_bytes())
    }

    fn arrays(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        self.online.visit("online", &mut |n, m| out.push((n, m)));
        self.target.visit("target", &mut |n, m| out.push((n, m)));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arrays = self.arrays();
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vocabulary: self.tokenizer.words().to_vec(),
            tau: self.tau,
            lambda: self.lambda,
            step: self.step,
            arrays: arrays
                .iter()
                .map(|(n, m)| ArrayEntry {
                    name: n.clone(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let total: usize = arrays.iter().map(|(_, m)| m.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + header_bytes.len() + total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, m) in arrays {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |d: String| Error::format("checkpoint", d);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fail("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
        if header.format_version != FORMAT_VERSION {
            return Err(fail(format!("unsupported format version {}", header.format_version)));
        }
        let tokenizer = Tokenizer::from_words(header.vocabulary.iter().skip(3).cloned());
        if tokenizer.words() != header.vocabulary.as_slice() {
            return Err(fail("vocabulary does not start with the reserved tokens".into()));
        }
        let mut ckpt = Checkpoint::init(&header.config, tokenizer)?;
        ckpt.tau = header.tau;
        ckpt.lambda = header.lambda;
        ckpt.step = header.step;

        let mut offset = body_start;
        let mut data: HashMap<String, (usize, usize, &[u8])> = HashMap::new();
        for e in &header.arrays {
            let len = e.rows * e.cols * 8;
            let end = offset
                .checked_add(len)
                .filter(|&end| end <= bytes.len())
                .ok_or_else(|| fail(format!("array `{}` truncated", e.name)))?;
            data.insert(e.name.clone(), (e.rows, e.cols, &bytes[offset..end]));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - offset)));
        }
        let mut missing = Vec::new();
        let mut fill = |name: String, m: &mut Mat| {
            match data.remove(&name) {
                Some((r, c, raw)) if (r, c) == m.dim() => {
                    for (dst, chunk) in m.iter_mut().zip(raw.chunks_exact(8)) {
                        *dst = f64::from_le_bytes(chunk.try_into().unwrap());
                    }
                }
                _ => missing.push(name),
            }
        };
        ckpt.online.visit_mut("online", &mut fill);
        ckpt.target.visit_mut("target", &mut fill);
        if !missing.is_empty() {
            return Err(fail(format!("missing or misshapen arrays: {missing:?}")));
        }
        if let Some(extra) = data.keys().next() {
            return Err(fail(format!("unexpected array `{extra}`")));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        artifact::write_atomic_with(path, |w| w.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    vocabulary: Vec<String>,
    tau: f64,
    lambda: f64,
    step: u64,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}
