//! Contrastive training of the reformulation network, the moving-average
//! target schedule, and the λ late-fusion fine-tune.

pub mod loss;
pub mod optim;

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::checkpoint::Checkpoint;
use crate::data::{index_by_id, ImageRecord};
use crate::error::{Error, Result};
use crate::model::{ema_update, forward_batch, patchify, ModelConfig, Network};
use crate::nn::{Mat, Params};
use crate::text::{TokenSequence, Tokenizer};
use crate::triplets::TripletDataset;

pub use loss::{contrastive_loss, loss_and_gradient, loss_gradient, normalize_rows, LossOutput};
pub use optim::{clip_grad_norm, AdamW, ScalarAdam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauMode {
    Fixed,
    Learnable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub ema_momentum: f64,
    pub tau: TauMode,
    pub seed: u64,
    pub shuffle: bool,
    /// Targets come from the online parameters, with gradient.
    pub no_ema: bool,
    /// Builds the network without cross-attention sub-layers.
    pub no_cross_attention: bool,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Step size for the λ logit during the combiner fine-tune.
    pub combiner_learning_rate: f64,
    pub combiner_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            optimizer: OptimizerKind::Adamw,
            ema_momentum: 0.996,
            tau: TauMode::Fixed,
            seed: 0,
            shuffle: true,
            no_ema: false,
            no_cross_attention: false,
            grad_clip: None,
            combiner_learning_rate: 0.05,
            combiner_epochs: 10,
        }
    }
}

impl TrainConfig {
    /// Optimizer settings used for a pretrained large backbone.
    pub fn large_backbone_preset() -> Self {
        Self {
            learning_rate: 2e-6,
            weight_decay: 0.1,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum {} outside [0, 1]", self.ema_momentum));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        if !(self.combiner_learning_rate > 0.0 && self.combiner_learning_rate.is_finite()) {
            return bad(format!(
                "combiner_learning_rate {} must be positive",
                self.combiner_learning_rate
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch_size: usize,
    pub loss: f64,
    pub tau: f64,
    pub lambda: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub tau: f64,
    pub lambda: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn epoch_means(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// One JSON object per line, tagged `"kind": "step"` or `"kind": "epoch"`,
    /// each epoch line after that epoch's steps.
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let mut steps = self.steps.iter().peekable();
        for e in &self.epochs {
            while let Some(s) = steps.next_if(|s| s.epoch <= e.epoch) {
                serde_json::to_writer(&mut out, &LogLine::Step(s))?;
                out.push(b'\n');
            }
            serde_json::to_writer(&mut out, &LogLine::Epoch(e))?;
            out.push(b'\n');
        }
        for s in steps {
            serde_json::to_writer(&mut out, &LogLine::Step(s))?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_jsonl()?;
        artifact::write_atomic_with(path, |w| w.write_all(&bytes))
    }
}

/// `λ e_r + (1 - λ) t`.
pub fn fuse(e_r: &Array1<f64>, text_pooled: &Array1<f64>, lambda: f64) -> Result<Array1<f64>> {
    check_lambda(lambda)?;
    if e_r.len() != text_pooled.len() {
        return Err(Error::DimensionMismatch(format!(
            "e_r has {} dims, text vector {}",
            e_r.len(),
            text_pooled.len()
        )));
    }
    Ok(fuse_unchecked(e_r, text_pooled, lambda))
}

/// Row-wise [`fuse`] over a batch.
pub fn fuse_rows(e_r: &Mat, text_pooled: &Mat, lambda: f64) -> Result<Mat> {
    check_lambda(lambda)?;
    if e_r.dim() != text_pooled.dim() {
        return Err(Error::DimensionMismatch(format!(
            "e_r batch {:?}, text batch {:?}",
            e_r.dim(),
            text_pooled.dim()
        )));
    }
    Ok(fuse_unchecked(e_r, text_pooled, lambda))
}

fn fuse_unchecked<D: ndarray::Dimension>(
    a: &ndarray::Array<f64, D>,
    b: &ndarray::Array<f64, D>,
    lambda: f64,
) -> ndarray::Array<f64, D> {
    // Endpoints are returned untouched so λ ∈ {0, 1} reproduce either input bit for bit.
    if lambda == 1.0 {
        a.clone()
    } else if lambda == 0.0 {
        b.clone()
    } else {
        a * lambda + b * (1.0 - lambda)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::LambdaOutOfRange(lambda))
    }
}

/// Batches of dataset indices for one epoch. A trailing batch of one is
/// dropped unless the configured batch size is itself one.
fn epoch_batches(n: usize, batch_size: usize, shuffle: bool, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2 || batch_size == 1)
        .map(|c| c.to_vec())
        .collect()
}

/// Image patches and token sequences prepared once per run.
struct Prepared {
    ref_patches: Vec<Mat>,
    target_patches: Vec<Mat>,
    tokens: Vec<TokenSequence>,
}

fn prepare(
    dataset: &TripletDataset,
    collection: &[ImageRecord],
    cfg: &ModelConfig,
    tokenizer: &Tokenizer,
) -> Result<Prepared> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("training dataset is empty".into()));
    }
    dataset.check_closure(collection)?;
    let by_id = index_by_id(collection);
    let mut cache: HashMap<&str, Mat> = HashMap::new();
    let mut patches_of = |id: &str| -> Result<Mat> {
        if let Some(p) = cache.get(id) {
            return Ok(p.clone());
        }
        let idx = by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::DanglingId(id.to_string()))?;
        let p = patchify(cfg, &[&collection[idx]])?;
        cache.insert(&collection[idx].id, p.clone());
        Ok(p)
    };
    let mut ref_patches = Vec::with_capacity(dataset.len());
    let mut target_patches = Vec::with_capacity(dataset.len());
    for t in &dataset.triplets {
        ref_patches.push(patches_of(&t.ref_id)?);
        target_patches.push(patches_of(&t.target_id)?);
    }
    let tokens = dataset
        .triplets
        .iter()
        .map(|t| tokenizer.encode(&t.reformulation, cfg.max_text_len))
        .collect();
    Ok(Prepared {
        ref_patches,
        target_patches,
        tokens,
    })
}

fn stack(parts: &[Mat], idx: &[usize]) -> Mat {
    let views: Vec<_> = idx.iter().map(|&i| parts[i].view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("patch blocks share a width")
}

fn non_finite(step: u64, epoch: usize, detail: impl Into<String>) -> Error {
    Error::NonFiniteLoss {
        step,
        epoch,
        detail: detail.into(),
    }
}

/// Loss and online-parameter gradient (written into `grad`) for one batch
/// of reference patches, reformulation tokens and target patches. With the
/// moving-average target the target embeddings are constants; with
/// `no_ema` they come from the online network and gradient flows through
/// both branches.
pub fn batch_gradient(
    ckpt: &Checkpoint,
    q_patches: Mat,
    q_tokens: &[&TokenSequence],
    t_patches: Mat,
    no_ema: bool,
    grad: &mut Network,
) -> Result<LossOutput> {
    let cfg = &ckpt.config;
    let null = ckpt.null_tokens();
    let t_tokens = vec![&null; q_tokens.len()];
    let (e_r, q_cache) = ckpt.online.forward(cfg, q_patches, q_tokens)?;
    let (e_t, t_cache) = if no_ema {
        let (e, c) = ckpt.online.forward(cfg, t_patches, &t_tokens)?;
        (e, Some(c))
    } else {
        let (e, _) = forward_batch(
            cfg,
            &ckpt.target.visual,
            &ckpt.target.predictor,
            &ckpt.online.text,
            t_patches,
            &t_tokens,
        )?;
        (e, None)
    };
    let out = loss_and_gradient(&e_r, &e_t, ckpt.tau)?;
    grad.zero();
    ckpt.online.backward(&q_cache, &out.d_query, grad);
    if let Some(c) = &t_cache {
        ckpt.online.backward(c, &out.d_target, grad);
    }
    Ok(out)
}

/// Initializes a checkpoint for `model_cfg` (cross-attention off when the
/// ablation flag asks for it) and trains it on `dataset`.
pub fn train(
    dataset: &TripletDataset,
    collection: &[ImageRecord],
    model_cfg: &ModelConfig,
    tokenizer: Tokenizer,
    train_cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    let mut cfg = model_cfg.clone();
    if train_cfg.no_cross_attention {
        cfg.cross_attention = false;
    }
    let ckpt = Checkpoint::init(&cfg, tokenizer)?;
    train_from(ckpt, dataset, collection, train_cfg)
}

/// Continues training an existing checkpoint.
pub fn train_from(
    mut ckpt: Checkpoint,
    dataset: &TripletDataset,
    collection: &[ImageRecord],
    train_cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    train_cfg.validate()?;
    let cfg = ckpt.config.clone();
    let prep = prepare(dataset, collection, &cfg, &ckpt.tokenizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut opt = AdamW::new(&ckpt.online, train_cfg.learning_rate, train_cfg.weight_decay);
    let mut tau_opt = ScalarAdam::new(train_cfg.learning_rate);
    let mut log_tau = ckpt.tau.ln();
    let mut grad = ckpt.online.zeros_like();
    let mut log = TrainLog::default();
    let start = Instant::now();

    for epoch in 0..train_cfg.epochs {
        let batches = epoch_batches(dataset.len(), train_cfg.batch_size, train_cfg.shuffle, &mut rng);
        let mut epoch_loss = 0.0;
        for idx in &batches {
            let step = ckpt.step;
            let q_patches = stack(&prep.ref_patches, idx);
            let t_patches = stack(&prep.target_patches, idx);
            let q_tokens: Vec<&TokenSequence> = idx.iter().map(|&i| &prep.tokens[i]).collect();

            let out = batch_gradient(&ckpt, q_patches, &q_tokens, t_patches, train_cfg.no_ema, &mut grad)
                .map_err(|e| match e {
                    Error::ZeroVector(row) => non_finite(step, epoch, format!("zero embedding in batch row {row}")),
                    other => other,
                })?;
            if !out.loss.is_finite() {
                return Err(non_finite(step, epoch, format!("loss = {}", out.loss)));
            }
            let mut bad = None;
            grad.visit("", &mut |name, m| {
                if bad.is_none() && m.iter().any(|v| !v.is_finite()) {
                    bad = Some(name);
                }
            });
            if let Some(name) = bad {
                return Err(non_finite(step, epoch, format!("non-finite gradient in `{name}`")));
            }
            if let Some(c) = train_cfg.grad_clip {
                clip_grad_norm(&mut grad, c);
            }
            opt.step(&mut ckpt.online, &grad)?;
            if train_cfg.tau == TauMode::Learnable {
                tau_opt.step(&mut log_tau, out.d_tau * ckpt.tau);
                ckpt.tau = log_tau.exp();
            }
            let m = if train_cfg.no_ema { 0.0 } else { train_cfg.ema_momentum };
            ema_update(&ckpt.online, &mut ckpt.target, m)?;

            ckpt.step += 1;
            epoch_loss += out.loss;
            log.steps.push(StepRecord {
                step: ckpt.step,
                epoch,
                batch_size: idx.len(),
                loss: out.loss,
                tau: ckpt.tau,
                lambda: ckpt.lambda,
                elapsed_secs: start.elapsed().as_secs_f64(),
            });
        }
        let mean = if batches.is_empty() { 0.0 } else { epoch_loss / batches.len() as f64 };
        log::info!("epoch {} mean loss {:.4} tau {:.3}", epoch + 1, mean, ckpt.tau);
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: mean,
            tau: ckpt.tau,
            lambda: ckpt.lambda,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
    }
    Ok((ckpt, log))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Query, text and target embeddings of a dataset under a frozen backbone.
pub struct FrozenEmbeddings {
    pub queries: Mat,
    pub texts: Mat,
    pub targets: Mat,
}

pub fn frozen_embeddings(
    ckpt: &Checkpoint,
    dataset: &TripletDataset,
    collection: &[ImageRecord],
) -> Result<FrozenEmbeddings> {
    dataset.check_closure(collection)?;
    let by_id = index_by_id(collection);
    let get = |id: &str| -> Result<&ImageRecord> {
        by_id
            .get(id)
            .map(|&i| &collection[i])
            .ok_or_else(|| Error::DanglingId(id.to_string()))
    };
    let refs = dataset
        .triplets
        .iter()
        .map(|t| get(&t.ref_id))
        .collect::<Result<Vec<_>>>()?;
    let targets = dataset
        .triplets
        .iter()
        .map(|t| get(&t.target_id))
        .collect::<Result<Vec<_>>>()?;
    let texts: Vec<&str> = dataset.triplets.iter().map(|t| t.reformulation.as_str()).collect();
    Ok(FrozenEmbeddings {
        queries: ckpt.embed_queries(&refs, &texts)?,
        texts: ckpt.text_pooled(&texts)?,
        targets: ckpt.embed_targets(&targets, false)?,
    })
}

/// Mean contrastive loss of fused queries over the batches of one unshuffled pass.
pub fn combiner_objective(emb: &FrozenEmbeddings, lambda: f64, tau: f64, batch_size: usize) -> Result<f64> {
    let fused = fuse_rows(&emb.queries, &emb.texts, lambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches = epoch_batches(fused.nrows(), batch_size, false, &mut rng);
    let mut total = 0.0;
    for idx in &batches {
        total += contrastive_loss(&fused.select(Axis(0), idx), &emb.targets.select(Axis(0), idx), tau)?;
    }
    Ok(if batches.is_empty() { 0.0 } else { total / batches.len() as f64 })
}

/// Fits λ with every other parameter frozen. λ is the sigmoid of an
/// unconstrained logit; τ stays fixed. Targets use the online parameters,
/// the same ones the retrieval index is built from.
pub fn finetune_combiner(
    ckpt: &Checkpoint,
    dataset: &TripletDataset,
    collection: &[ImageRecord],
    train_cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    train_cfg.validate()?;
    check_lambda(ckpt.lambda)?;
    let mut out = ckpt.clone();
    let mut log = TrainLog::default();
    if train_cfg.combiner_epochs == 0 || dataset.is_empty() {
        return Ok((out, log));
    }
    let emb = frozen_embeddings(ckpt, dataset, collection)?;
    let diff = &emb.queries - &emb.texts;
    let clamped = ckpt.lambda.clamp(1e-6, 1.0 - 1e-6);
    let mut logit = (clamped / (1.0 - clamped)).ln();
    let mut lambda = ckpt.lambda;
    let mut opt = ScalarAdam::new(train_cfg.combiner_learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let start = Instant::now();
    let mut step = 0u64;

    for epoch in 0..train_cfg.combiner_epochs {
        let batches = epoch_batches(dataset.len(), train_cfg.batch_size, train_cfg.shuffle, &mut rng);
        let mut epoch_loss = 0.0;
        for idx in &batches {
            let q = emb.queries.select(Axis(0), idx);
            let t = emb.texts.select(Axis(0), idx);
            let fused = fuse_rows(&q, &t, lambda)?;
            let targets = emb.targets.select(Axis(0), idx);
            let res = loss_and_gradient(&fused, &targets, ckpt.tau)?;
            if !res.loss.is_finite() {
                return Err(non_finite(step, epoch, format!("combiner loss = {}", res.loss)));
            }
            // dL/dλ = Σ dL/de_f ⊙ (e_r - t); dλ/dlogit = λ(1 - λ).
            let d_lambda = (&res.d_query * &diff.select(Axis(0), idx)).sum();
            opt.step(&mut logit, d_lambda * lambda * (1.0 - lambda));
            lambda = sigmoid(logit);
            step += 1;
            epoch_loss += res.loss;
            log.steps.push(StepRecord {
                step,
                epoch,
                batch_size: idx.len(),
                loss: res.loss,
                tau: ckpt.tau,
                lambda,
                elapsed_secs: start.elapsed().as_secs_f64(),
            });
        }
        let mean = if batches.is_empty() { 0.0 } else { epoch_loss / batches.len() as f64 };
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: mean,
            tau: ckpt.tau,
            lambda,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
    }
    if step > 0 {
        out.lambda = lambda;
    }
    Ok((out, log))
}
