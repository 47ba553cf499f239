//! Text-guided embedding reformulation network.
//!
//! A patch transformer whose blocks run self-attention, then cross-attention
//! with image tokens as queries and text tokens as keys/values, then an MLP,
//! each sub-layer pre-normalized and residual. A causal text encoder provides
//! the key/value sequence and a pooled vector; the predictor maps the
//! mean-pooled visual sequence concatenated with the pooled text to the
//! output embedding.

use ndarray::{s, Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::nn::{
    impl_params, normal_init, segments_from_lens, AttnCache, AttnMask, Attention, LayerNorm,
    Linear, LnCache, Mat, Mlp, MlpCache, Params, Segments,
};
use crate::text::{TokenSequence, NULL_TOKEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_ratio: usize,
    /// 0 means "take it from the tokenizer".
    pub text_vocab_size: usize,
    pub max_text_len: usize,
    pub text_layers: usize,
    pub null_token_id: usize,
    pub ema_momentum: f64,
    pub temperature_init: f64,
    pub lambda_init: f64,
    pub seed: u64,
    /// `false` drops every cross-attention sub-layer.
    pub cross_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 8,
            d_model: 64,
            n_heads: 4,
            n_blocks: 4,
            mlp_ratio: 4,
            text_vocab_size: 0,
            max_text_len: 16,
            text_layers: 2,
            null_token_id: NULL_TOKEN,
            ema_momentum: 0.996,
            temperature_init: 10.0,
            lambda_init: 0.9,
            seed: 0,
            cross_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.channels == 0 || self.mlp_ratio == 0 || self.max_text_len == 0 {
            return bad("channels, mlp_ratio and max_text_len must be positive".into());
        }
        if self.null_token_id >= self.text_vocab_size {
            return bad(format!(
                "null_token_id {} must be below text_vocab_size {}",
                self.null_token_id, self.text_vocab_size
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum {} outside [0, 1]", self.ema_momentum));
        }
        if !(self.temperature_init > 0.0 && self.temperature_init.is_finite()) {
            return Err(Error::NonPositiveTemperature(self.temperature_init));
        }
        if !(0.0..=1.0).contains(&self.lambda_init) {
            return Err(Error::LambdaOutOfRange(self.lambda_init));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
}

/// An `L x d` sequence of token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqEmbedding {
    pub data: Mat,
    pub modality: Modality,
}

impl SeqEmbedding {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}
impl_params!(EncoderLayer { ln1, attn, ln2, mlp });

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub layers: Vec<EncoderLayer>,
    pub ln_final: LayerNorm,
}
impl_params!(TextEncoder { tok_emb, pos_emb, layers, ln_final });

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub ln: LayerNorm,
    pub attn: Attention,
}
impl_params!(CrossAttention { ln, attn });

#[derive(Debug, Clone, PartialEq)]
pub struct ReformBlock {
    pub ln1: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<CrossAttention>,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}
impl_params!(ReformBlock { ln1, self_attn, cross, ln2, mlp });

#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoder {
    pub patch: Linear,
    pub pos_emb: Mat,
    pub blocks: Vec<ReformBlock>,
    pub ln_post: LayerNorm,
}
impl_params!(VisualEncoder { patch, pos_emb, blocks, ln_post });

/// `[mean-pooled visual ; pooled text]` (width `2d`) -> hidden `2d` -> `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub mlp: Mlp,
}
impl_params!(Predictor { mlp });

/// Online parameters: visual encoder, predictor, text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub visual: VisualEncoder,
    pub predictor: Predictor,
    pub text: TextEncoder,
}
impl_params!(Network { visual, predictor, text });

/// Moving-average copy of the visual encoder and predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNetwork {
    pub visual: VisualEncoder,
    pub predictor: Predictor,
}
impl_params!(TargetNetwork { visual, predictor });

const EMB_STD: f64 = 0.02;

impl Network {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let hidden = d * cfg.mlp_ratio;
        let text = TextEncoder {
            tok_emb: normal_init(cfg.text_vocab_size, d, EMB_STD, &mut rng),
            pos_emb: normal_init(cfg.max_text_len, d, EMB_STD, &mut rng),
            layers: (0..cfg.text_layers)
                .map(|_| EncoderLayer {
                    ln1: LayerNorm::new(d),
                    attn: Attention::new(d, &mut rng, false),
                    ln2: LayerNorm::new(d),
                    mlp: Mlp::new(d, hidden, d, &mut rng),
                })
                .collect(),
            ln_final: LayerNorm::new(d),
        };
        let visual = VisualEncoder {
            patch: Linear::xavier(cfg.patch_dim(), d, &mut rng),
            pos_emb: normal_init(cfg.n_patches(), d, EMB_STD, &mut rng),
            blocks: (0..cfg.n_blocks)
                .map(|_| {
                    let ln1 = LayerNorm::new(d);
                    let self_attn = Attention::new(d, &mut rng, false);
                    // Drawn even when disabled so both variants share all other weights.
                    let cross = CrossAttention {
                        ln: LayerNorm::new(d),
                        attn: Attention::new(d, &mut rng, true),
                    };
                    ReformBlock {
                        ln1,
                        self_attn,
                        cross: cfg.cross_attention.then_some(cross),
                        ln2: LayerNorm::new(d),
                        mlp: Mlp::new(d, hidden, d, &mut rng),
                    }
                })
                .collect(),
            ln_post: LayerNorm::new(d),
        };
        let predictor = Predictor {
            mlp: Mlp::new(2 * d, 2 * d, d, &mut rng),
        };
        Ok(Self {
            visual,
            predictor,
            text,
        })
    }

    pub fn target_copy(&self) -> TargetNetwork {
        TargetNetwork {
            visual: self.visual.clone(),
            predictor: self.predictor.clone(),
        }
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }
}

/// Output of the text encoder over a packed batch.
#[derive(Debug, Clone)]
pub struct TextOut {
    pub seq: Mat,
    pub segs: Segments,
    pub key_valid: Vec<bool>,
    /// Row of each sequence's last valid token.
    pub pool_rows: Vec<usize>,
    pub pooled: Mat,
}

#[derive(Debug, Clone)]
struct EncLayerCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    mlp: MlpCache,
}

#[derive(Debug, Clone)]
pub struct TextCache {
    ids: Vec<usize>,
    positions: Vec<usize>,
    layers: Vec<EncLayerCache>,
    ln_final: LnCache,
    pool_rows: Vec<usize>,
}

impl TextEncoder {
    pub fn forward(
        &self,
        cfg: &ModelConfig,
        seqs: &[&TokenSequence],
    ) -> Result<(TextOut, TextCache)> {
        for seq in seqs {
            seq.validate(cfg.text_vocab_size, cfg.max_text_len)?;
        }
        let segs = segments_from_lens(seqs.iter().map(|s| s.len()));
        let rows: usize = seqs.iter().map(|s| s.len()).sum();
        let d = cfg.d_model;
        let mut ids = Vec::with_capacity(rows);
        let mut positions = Vec::with_capacity(rows);
        let mut key_valid = Vec::with_capacity(rows);
        let mut pool_rows = Vec::with_capacity(seqs.len());
        for (seq, &(start, _)) in seqs.iter().zip(&segs) {
            ids.extend_from_slice(&seq.ids);
            positions.extend(0..seq.len());
            key_valid.extend_from_slice(&seq.mask);
            pool_rows.push(start + seq.last_valid());
        }
        let mut x = Mat::zeros((rows, d));
        for (r, (&id, &pos)) in ids.iter().zip(&positions).enumerate() {
            let mut row = x.row_mut(r);
            row += &self.tok_emb.row(id);
            row += &self.pos_emb.row(pos);
        }
        let mask = AttnMask {
            causal: true,
            key_valid: Some(&key_valid),
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (a, ln1) = layer.ln1.forward(&x);
            let (sa, attn) = layer.attn.forward(a.clone(), &segs, a, &segs, mask, cfg.n_heads);
            x += &sa;
            let (b, ln2) = layer.ln2.forward(&x);
            let (m, mlp) = layer.mlp.forward(b);
            x += &m;
            layers.push(EncLayerCache { ln1, attn, ln2, mlp });
        }
        let (seq, ln_final) = self.ln_final.forward(&x);
        let pooled = seq.select(Axis(0), &pool_rows);
        let cache = TextCache {
            ids,
            positions,
            layers,
            ln_final,
            pool_rows: pool_rows.clone(),
        };
        Ok((
            TextOut {
                seq,
                segs,
                key_valid,
                pool_rows,
                pooled,
            },
            cache,
        ))
    }

    pub fn backward(&self, cache: &TextCache, d_seq: &Mat, d_pooled: &Mat, grad: &mut TextEncoder) {
        let mut dy = d_seq.clone();
        for (b, &r) in cache.pool_rows.iter().enumerate() {
            let mut row = dy.row_mut(r);
            row += &d_pooled.row(b);
        }
        let mut dx = self.ln_final.backward(&cache.ln_final, &dy, &mut grad.ln_final);
        for ((layer, lc), lg) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grad.layers.iter_mut())
            .rev()
        {
            let db = layer.mlp.backward(&lc.mlp, &dx, &mut lg.mlp);
            dx += &layer.ln2.backward(&lc.ln2, &db, &mut lg.ln2);
            let (dq, dkv) = layer.attn.backward(&lc.attn, &dx, &mut lg.attn);
            dx += &layer.ln1.backward(&lc.ln1, &(dq + dkv), &mut lg.ln1);
        }
        for (r, (&id, &pos)) in cache.ids.iter().zip(&cache.positions).enumerate() {
            let g = dx.row(r);
            let mut t = grad.tok_emb.row_mut(id);
            t += &g;
            let mut p = grad.pos_emb.row_mut(pos);
            p += &g;
        }
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    self_attn: AttnCache,
    cross: Option<(LnCache, AttnCache)>,
    ln2: LnCache,
    mlp: MlpCache,
}

impl ReformBlock {
    fn forward(
        &self,
        x: Mat,
        vsegs: &Segments,
        text: &TextOut,
        n_heads: usize,
    ) -> (Mat, BlockCache) {
        let mut x = x;
        let (a, ln1) = self.ln1.forward(&x);
        let (sa, self_attn) =
            self.self_attn
                .forward(a.clone(), vsegs, a, vsegs, AttnMask::NONE, n_heads);
        x += &sa;
        let cross = self.cross.as_ref().map(|c| {
            let (b, lnc) = c.ln.forward(&x);
            let mask = AttnMask {
                causal: false,
                key_valid: Some(&text.key_valid),
            };
            let (ca, ac) = c
                .attn
                .forward(b, vsegs, text.seq.clone(), &text.segs, mask, n_heads);
            x += &ca;
            (lnc, ac)
        });
        let (c, ln2) = self.ln2.forward(&x);
        let (m, mlp) = self.mlp.forward(c);
        x += &m;
        (
            x,
            BlockCache {
                ln1,
                self_attn,
                cross,
                ln2,
                mlp,
            },
        )
    }

    /// Returns `dL/dx`; text-side gradients are added into `d_text`.
    fn backward(&self, cache: &BlockCache, dy: &Mat, grad: &mut ReformBlock, d_text: &mut Mat) -> Mat {
        let mut dx = dy.clone();
        let dc = self.mlp.backward(&cache.mlp, &dx, &mut grad.mlp);
        dx += &self.ln2.backward(&cache.ln2, &dc, &mut grad.ln2);
        if let (Some(c), Some((lnc, ac)), Some(g)) = (&self.cross, &cache.cross, grad.cross.as_mut()) {
            let (db, dt) = c.attn.backward(ac, &dx, &mut g.attn);
            *d_text += &dt;
            dx += &c.ln.backward(lnc, &db, &mut g.ln);
        }
        let (dq, dkv) = self.self_attn.backward(&cache.self_attn, &dx, &mut grad.self_attn);
        dx += &self.ln1.backward(&cache.ln1, &(dq + dkv), &mut grad.ln1);
        dx
    }

    /// One block applied to a single visual sequence and text sequence.
    pub fn apply(&self, x: &SeqEmbedding, t: &SeqEmbedding, n_heads: usize) -> Result<SeqEmbedding> {
        if x.modality != Modality::Visual || t.modality != Modality::Text {
            return Err(Error::DimensionMismatch(
                "reform block takes a visual sequence and a text sequence".into(),
            ));
        }
        let d = self.ln1.gamma.ncols();
        if x.width() != d || t.width() != d {
            return Err(Error::DimensionMismatch(format!(
                "block width {d}, visual width {}, text width {}",
                x.width(),
                t.width()
            )));
        }
        if x.is_empty() || t.is_empty() {
            return Err(Error::DimensionMismatch("empty sequence".into()));
        }
        let text = TextOut {
            seq: t.data.clone(),
            segs: vec![(0, t.len())],
            key_valid: vec![true; t.len()],
            pool_rows: vec![t.len() - 1],
            pooled: t.data.slice(s![t.len() - 1.., ..]).to_owned(),
        };
        let (out, _) = self.forward(x.data.clone(), &vec![(0, x.len())], &text, n_heads);
        Ok(SeqEmbedding {
            data: out,
            modality: Modality::Visual,
        })
    }
}

#[derive(Debug, Clone)]
pub struct VisualCache {
    patches: Mat,
    n_img: usize,
    blocks: Vec<BlockCache>,
    ln_post: LnCache,
}

impl VisualEncoder {
    pub fn forward(
        &self,
        cfg: &ModelConfig,
        patches: Mat,
        text: &TextOut,
    ) -> (Mat, VisualCache) {
        let np = cfg.n_patches();
        let n_img = patches.nrows() / np;
        let vsegs = segments_from_lens(std::iter::repeat_n(np, n_img));
        let mut x = self.patch.forward(&patches.view());
        for i in 0..n_img {
            let mut rows = x.slice_mut(s![i * np..(i + 1) * np, ..]);
            rows += &self.pos_emb;
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = block.forward(x, &vsegs, text, cfg.n_heads);
            x = y;
            blocks.push(c);
        }
        let (z, ln_post) = self.ln_post.forward(&x);
        (
            z,
            VisualCache {
                patches,
                n_img,
                blocks,
                ln_post,
            },
        )
    }

    /// Returns the gradient w.r.t. the packed text sequence.
    pub fn backward(
        &self,
        cache: &VisualCache,
        dz: &Mat,
        text_rows: usize,
        grad: &mut VisualEncoder,
    ) -> Mat {
        let d = dz.ncols();
        let mut d_text = Mat::zeros((text_rows, d));
        let mut dx = self.ln_post.backward(&cache.ln_post, dz, &mut grad.ln_post);
        for ((block, bc), bg) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            dx = block.backward(bc, &dx, bg, &mut d_text);
        }
        let np = self.pos_emb.nrows();
        for i in 0..cache.n_img {
            grad.pos_emb += &dx.slice(s![i * np..(i + 1) * np, ..]);
        }
        self.patch
            .backward_params(&cache.patches.view(), &dx, &mut grad.patch);
        d_text
    }
}

#[derive(Debug, Clone)]
pub struct PredictorCache {
    mlp: MlpCache,
    n_patches: usize,
}

impl Predictor {
    pub fn forward(&self, z: &Mat, n_patches: usize, text_pooled: &Mat) -> (Mat, PredictorCache) {
        let n_img = z.nrows() / n_patches;
        let d = z.ncols();
        let mut cat = Mat::zeros((n_img, 2 * d));
        for i in 0..n_img {
            let mean = z
                .slice(s![i * n_patches..(i + 1) * n_patches, ..])
                .mean_axis(Axis(0))
                .unwrap();
            cat.slice_mut(s![i, ..d]).assign(&mean);
            cat.slice_mut(s![i, d..]).assign(&text_pooled.row(i));
        }
        let (e, mlp) = self.mlp.forward(cat);
        (e, PredictorCache { mlp, n_patches })
    }

    /// Returns `(dL/dz, dL/d text_pooled)`.
    pub fn backward(&self, cache: &PredictorCache, de: &Mat, grad: &mut Predictor) -> (Mat, Mat) {
        let dcat = self.mlp.backward(&cache.mlp, de, &mut grad.mlp);
        let d = dcat.ncols() / 2;
        let np = cache.n_patches;
        let n_img = dcat.nrows();
        let mut dz = Mat::zeros((n_img * np, d));
        for i in 0..n_img {
            let g = dcat.slice(s![i, ..d]).mapv(|v| v / np as f64);
            for r in 0..np {
                dz.row_mut(i * np + r).assign(&g);
            }
        }
        (dz, dcat.slice(s![.., d..]).to_owned())
    }
}

/// Flattens images into `(n_img * n_patches) x patch_dim`, patches in
/// row-major order, pixels inside a patch in (row, col, channel) order.
pub fn patchify(cfg: &ModelConfig, images: &[&ImageRecord]) -> Result<Mat> {
    let (p, side, c) = (cfg.patch_size, cfg.image_size / cfg.patch_size, cfg.channels);
    let np = cfg.n_patches();
    let mut out = Mat::zeros((images.len() * np, cfg.patch_dim()));
    for (i, im) in images.iter().enumerate() {
        let shape = im.shape();
        if shape != (cfg.image_size, cfg.image_size, c) {
            return Err(Error::ShapeMismatch(format!(
                "image `{}` is {shape:?}, model expects {:?}",
                im.id,
                (cfg.image_size, cfg.image_size, c)
            )));
        }
        for pr in 0..side {
            for pc in 0..side {
                let mut row = out.row_mut(i * np + pr * side + pc);
                let patch = im.pixels.slice(s![pr * p..(pr + 1) * p, pc * p..(pc + 1) * p, ..]);
                for (dst, src) in row.iter_mut().zip(patch.iter()) {
                    *dst = *src;
                }
            }
        }
    }
    Ok(out)
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    text: TextCache,
    text_rows: usize,
    visual: VisualCache,
    predictor: PredictorCache,
}

/// Embeddings for a batch: text encoder, visual encoder, predictor.
pub fn forward_batch(
    cfg: &ModelConfig,
    visual: &VisualEncoder,
    predictor: &Predictor,
    text: &TextEncoder,
    patches: Mat,
    seqs: &[&TokenSequence],
) -> Result<(Mat, ForwardCache)> {
    let n_img = patches.nrows() / cfg.n_patches();
    if n_img != seqs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{n_img} images but {} token sequences",
            seqs.len()
        )));
    }
    let (tout, tcache) = text.forward(cfg, seqs)?;
    let (z, vcache) = visual.forward(cfg, patches, &tout);
    let (e, pcache) = predictor.forward(&z, cfg.n_patches(), &tout.pooled);
    Ok((
        e,
        ForwardCache {
            text: tcache,
            text_rows: tout.seq.nrows(),
            visual: vcache,
            predictor: pcache,
        },
    ))
}

impl Network {
    pub fn forward(
        &self,
        cfg: &ModelConfig,
        patches: Mat,
        seqs: &[&TokenSequence],
    ) -> Result<(Mat, ForwardCache)> {
        forward_batch(cfg, &self.visual, &self.predictor, &self.text, patches, seqs)
    }

    /// Accumulates `dL/dθ` for `dL/dE = de` into `grad`.
    pub fn backward(&self, cache: &ForwardCache, de: &Mat, grad: &mut Network) {
        let (dz, dpooled) = self.predictor.backward(&cache.predictor, de, &mut grad.predictor);
        let d_text = self
            .visual
            .backward(&cache.visual, &dz, cache.text_rows, &mut grad.visual);
        self.text.backward(&cache.text, &d_text, &dpooled, &mut grad.text);
    }

    /// Visual sequence for one image/text pair.
    pub fn encode(&self, cfg: &ModelConfig, image: &ImageRecord, tokens: &TokenSequence) -> Result<SeqEmbedding> {
        let patches = patchify(cfg, &[image])?;
        let (tout, _) = self.text.forward(cfg, &[tokens])?;
        let (z, _) = self.visual.forward(cfg, patches, &tout);
        Ok(SeqEmbedding {
            data: z,
            modality: Modality::Visual,
        })
    }

    /// Text sequence plus the pooled vector at the last valid position.
    pub fn encode_text(&self, cfg: &ModelConfig, tokens: &TokenSequence) -> Result<(SeqEmbedding, Array1<f64>)> {
        let (tout, _) = self.text.forward(cfg, &[tokens])?;
        let pooled = tout.pooled.row(0).to_owned();
        Ok((
            SeqEmbedding {
                data: tout.seq,
                modality: Modality::Text,
            },
            pooled,
        ))
    }

    pub fn predict(&self, z: &SeqEmbedding, text_pooled: &Array1<f64>) -> Result<Array1<f64>> {
        let d = self.visual.ln_post.gamma.ncols();
        if z.width() != d || text_pooled.len() != d || z.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "predictor expects width {d}, got sequence {} and pooled {}",
                z.width(),
                text_pooled.len()
            )));
        }
        let (e, _) = self.predictor.forward(
            &z.data,
            z.len(),
            &text_pooled.clone().insert_axis(Axis(0)),
        );
        Ok(e.row(0).to_owned())
    }
}

/// `target <- m * target + (1 - m) * online` for every target parameter,
/// matched to the online parameter of the same name.
pub fn ema_update<O: Params, T: Params>(online: &O, target: &mut T, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidConfig(format!("ema momentum {m} outside [0, 1]")));
    }
    let source: std::collections::HashMap<String, &Mat> = online.named().into_iter().collect();
    for (name, t) in target.named_mut() {
        let o = source
            .get(&name)
            .ok_or_else(|| Error::ShapeMismatch(format!("online tree has no `{name}`")))?;
        if o.dim() != t.dim() {
            return Err(Error::ShapeMismatch(format!(
                "`{name}`: online {:?} vs target {:?}",
                o.dim(),
                t.dim()
            )));
        }
        ndarray::Zip::from(t)
            .and(*o)
            .for_each(|tv, &ov| *tv = m * *tv + (1.0 - m) * ov);
    }
    Ok(())
}

/// sha256 over parameter names and little-endian values.
pub fn params_hash<P: Params>(params: &P) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    params.visit("", &mut |name, m| {
        h.update(name.as_bytes());
        for v in m.iter() {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::nn::xavier_uniform;
    use ndarray::Array3;
    use rand::Rng;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            mlp_ratio: 2,
            text_vocab_size: 12,
            max_text_len: 6,
            text_layers: 1,
            ..Default::default()
        }
    }

    fn image(seed: u64, size: usize) -> ImageRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = Array3::from_shape_fn((size, size, 3), |_| rng.random_range(0.0..1.0));
        ImageRecord::new(format!("im{seed}"), px, Split::Index).unwrap()
    }

    #[test]
    fn encode_shapes() {
        let cfg = ModelConfig {
            text_vocab_size: 20,
            ..Default::default()
        };
        let net = Network::new(&cfg).unwrap();
        let tokens = TokenSequence::new(vec![3, 4, 5, 2]);
        let z = net.encode(&cfg, &image(1, 32), &tokens).unwrap();
        assert_eq!(z.data.dim(), (16, 64));
        let (t, pooled) = net.encode_text(&cfg, &tokens).unwrap();
        assert_eq!(t.data.dim(), (4, 64));
        assert_eq!(pooled, t.data.row(3));
        let (null_seq, _) = net.encode_text(&cfg, &TokenSequence::null()).unwrap();
        assert_eq!(null_seq.data.dim(), (1, 64));
    }

    #[test]
    fn token_out_of_range() {
        let cfg = tiny_cfg();
        let net = Network::new(&cfg).unwrap();
        assert!(matches!(
            net.encode_text(&cfg, &TokenSequence::new(vec![99])),
            Err(Error::TokenOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn wrong_image_size_is_shape_mismatch() {
        let cfg = tiny_cfg();
        let net = Network::new(&cfg).unwrap();
        assert!(matches!(
            net.encode(&cfg, &image(0, 16), &TokenSequence::null()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn reform_block_shape_and_text_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ModelConfig {
            text_vocab_size: 10,
            ..Default::default()
        };
        let net = Network::new(&cfg).unwrap();
        let mut block = net.visual.blocks[0].clone();
        // give cross-attention a non-trivial output projection
        block.cross.as_mut().unwrap().attn.o.w = xavier_uniform(64, 64, &mut rng);
        let x = SeqEmbedding {
            data: normal_init(17, 64, 1.0, &mut rng),
            modality: Modality::Visual,
        };
        let t = SeqEmbedding {
            data: normal_init(8, 64, 1.0, &mut rng),
            modality: Modality::Text,
        };
        let y = block.apply(&x, &t, 4).unwrap();
        assert_eq!(y.data.dim(), (17, 64));
        let perm = [3usize, 7, 0, 5, 1, 6, 2, 4];
        let t_perm = SeqEmbedding {
            data: t.data.select(Axis(0), &perm),
            modality: Modality::Text,
        };
        let y_perm = block.apply(&x, &t_perm, 4).unwrap();
        let diff = (&y.data - &y_perm.data).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-12, "diff {diff}");
        let wrong = SeqEmbedding {
            data: Mat::zeros((3, 32)),
            modality: Modality::Text,
        };
        assert!(matches!(block.apply(&x, &wrong, 4), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn zero_cross_attention_equals_block_without_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ModelConfig {
            text_vocab_size: 10,
            ..Default::default()
        };
        let net = Network::new(&cfg).unwrap();
        let block = net.visual.blocks[0].clone();
        let mut without = block.clone();
        without.cross = None;
        let x = SeqEmbedding {
            data: normal_init(16, 64, 1.0, &mut rng),
            modality: Modality::Visual,
        };
        let t = SeqEmbedding {
            data: normal_init(5, 64, 1.0, &mut rng),
            modality: Modality::Text,
        };
        assert_eq!(block.apply(&x, &t, 4).unwrap(), without.apply(&x, &t, 4).unwrap());
    }

    #[test]
    fn predictor_pooling() {
        let cfg = tiny_cfg();
        let net = Network::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pooled = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let z = SeqEmbedding {
            data: normal_init(4, 8, 1.0, &mut rng),
            modality: Modality::Visual,
        };
        let permuted = SeqEmbedding {
            data: z.data.select(Axis(0), &[2, 0, 3, 1]),
            modality: Modality::Visual,
        };
        let a = net.predict(&z, &pooled).unwrap();
        let b = net.predict(&permuted, &pooled).unwrap();
        assert_eq!(a.len(), 8);
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
        // single row: mean pooling is the identity
        let one = SeqEmbedding {
            data: z.data.slice(s![0..1, ..]).to_owned(),
            modality: Modality::Visual,
        };
        let mut cat = Mat::zeros((1, 16));
        cat.slice_mut(s![0, ..8]).assign(&one.data.row(0));
        cat.slice_mut(s![0, 8..]).assign(&pooled);
        let direct = net.predictor.mlp.forward(cat).0;
        assert_eq!(net.predict(&one, &pooled).unwrap(), direct.row(0));
        assert!(net.predict(&one, &Array1::zeros(3)).is_err());
    }

    #[test]
    fn ema_arithmetic() {
        let cfg = tiny_cfg();
        let online = Network::new(&cfg).unwrap();
        let mut target = online.target_copy();
        target.zero();
        let mut frozen = target.clone();
        ema_update(&online, &mut frozen, 1.0).unwrap();
        assert_eq!(frozen, target);
        let mut copied = target.clone();
        ema_update(&online, &mut copied, 0.0).unwrap();
        assert_eq!(copied, online.target_copy());

        let mut ones = online.clone();
        ones.visit_mut("", &mut |_, m| m.fill(1.0));
        let mut t = target.clone();
        ema_update(&ones, &mut t, 0.99).unwrap();
        t.visit("", &mut |_, m| assert!(m.iter().all(|v| (v - 0.01).abs() < 1e-15)));
    }

    #[test]
    fn ema_shape_mismatch() {
        let cfg = tiny_cfg();
        let online = Network::new(&cfg).unwrap();
        let other = Network::new(&ModelConfig {
            d_model: 4,
            ..tiny_cfg()
        })
        .unwrap();
        let mut target = other.target_copy();
        assert!(matches!(
            ema_update(&online, &mut target, 0.5),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.patch_size = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.text_vocab_size = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.temperature_init = 0.0;
        assert!(matches!(c.validate(), Err(Error::NonPositiveTemperature(_))));
    }
}
