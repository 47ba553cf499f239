//! Dense layers with explicit backward passes, in `f64`.
//!
//! Sequences of different lengths are packed row-wise into one matrix and
//! addressed through [`Segments`]; row-wise layers run on the whole pack while
//! attention runs segment by segment.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub type Mat = Array2<f64>;

/// Named parameter traversal. Gradients and optimizer moments reuse the
/// model types, so two trees line up by visiting both in order.
pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat));

    fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, m| out.push((n, m)));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, m| out.push((n, m)));
        out
    }

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, m| m.fill(0.0));
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Mat {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        f(prefix.to_string(), self)
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        f(prefix.to_string(), self)
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<T: Params> Params for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat)) {
        if let Some(inner) = self {
            inner.visit(prefix, f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat)) {
        if let Some(inner) = self {
            inner.visit_mut(prefix, f);
        }
    }
}

macro_rules! impl_params {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Params for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a $crate::nn::Mat)) {
                $( self.$field.visit(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut<'a>(
                &'a mut self,
                prefix: &str,
                f: &mut dyn FnMut(String, &'a mut $crate::nn::Mat),
            ) {
                $( self.$field.visit_mut(&$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use impl_params;

/// `(start_row, len)` of each packed sequence.
pub type Segments = Vec<(usize, usize)>;

pub fn segments_from_lens(lens: impl IntoIterator<Item = usize>) -> Segments {
    let mut start = 0;
    lens.into_iter()
        .map(|len| {
            let seg = (start, len);
            start += len;
            seg
        })
        .collect()
}

pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

pub fn normal_init(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
    let dist = Normal::new(0.0, std).unwrap();
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// `acc += a^T b`
fn add_at_b(acc: &mut Mat, a: &ArrayView2<f64>, b: &ArrayView2<f64>) {
    general_mat_mul(1.0, &a.t(), b, 1.0, acc);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub w: Mat,
    /// `1 x out`
    pub b: Mat,
}
impl_params!(Linear { w, b });

impl Linear {
    pub fn xavier(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: xavier_uniform(input, output, rng),
            b: Mat::zeros((1, output)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Mat::zeros((input, output)),
            b: Mat::zeros((1, output)),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Mat {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &Mat, grad: &mut Linear) -> Mat {
        self.backward_params(x, dy, grad);
        dy.dot(&self.w.t())
    }

    pub fn backward_params(&self, x: &ArrayView2<f64>, dy: &Mat, grad: &mut Linear) {
        add_at_b(&mut grad.w, x, &dy.view());
        grad.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Mat,
    pub beta: Mat,
}
impl_params!(LayerNorm { gamma, beta });

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gamma: Mat::ones((1, d)),
            beta: Mat::zeros((1, d)),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache, dy: &Mat, grad: &mut LayerNorm) -> Mat {
        let d = dy.ncols() as f64;
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let mut dx = Mat::zeros(dy.raw_dim());
        for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
            let g = dxhat.row(r);
            let xh = cache.xhat.row(r);
            let sum_g = g.sum();
            let sum_gx = g.dot(&xh);
            let is = cache.inv_std[r];
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| *o = is / d * (d * gi - sum_g - xi * sum_gx));
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu(x: &Mat) -> Mat {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Mat, dy: &Mat) -> Mat {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|g, &v| {
        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *g *= d;
    });
    dx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}
impl_params!(Mlp { fc1, fc2 });

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Mat,
    h: Mat,
    g: Mat,
}

impl Mlp {
    pub fn new(d: usize, hidden: usize, out: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::xavier(d, hidden, rng),
            fc2: Linear::xavier(hidden, out, rng),
        }
    }

    pub fn forward(&self, x: Mat) -> (Mat, MlpCache) {
        let h = self.fc1.forward(&x.view());
        let g = gelu(&h);
        let y = self.fc2.forward(&g.view());
        (y, MlpCache { x, h, g })
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Mat, grad: &mut Mlp) -> Mat {
        let dg = self.fc2.backward(&cache.g.view(), dy, &mut grad.fc2);
        let dh = gelu_backward(&cache.h, &dg);
        self.fc1.backward(&cache.x.view(), &dh, &mut grad.fc1)
    }
}

/// Multi-head scaled dot-product attention. Queries come from one pack and
/// keys/values from another; segment `i` of the query pack attends only to
/// segment `i` of the key/value pack.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}
impl_params!(Attention { q, k, v, o });

#[derive(Debug, Clone)]
pub struct AttnCache {
    xq: Mat,
    xkv: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Attention weights per (segment, head).
    probs: Vec<Mat>,
    ctx: Mat,
    q_segs: Segments,
    kv_segs: Segments,
}

/// How keys are hidden from queries.
#[derive(Debug, Clone, Copy)]
pub struct AttnMask<'a> {
    /// Query `i` sees key `j` only when `j <= i` (self-attention only).
    pub causal: bool,
    /// Per key/value row; `false` rows are never attended.
    pub key_valid: Option<&'a [bool]>,
}

impl AttnMask<'_> {
    pub const NONE: AttnMask<'static> = AttnMask {
        causal: false,
        key_valid: None,
    };
}

impl Attention {
    pub fn new(d: usize, rng: &mut impl Rng, zero_output: bool) -> Self {
        Self {
            q: Linear::xavier(d, d, rng),
            k: Linear::xavier(d, d, rng),
            v: Linear::xavier(d, d, rng),
            o: if zero_output {
                Linear::zeros(d, d)
            } else {
                Linear::xavier(d, d, rng)
            },
        }
    }

    pub fn forward(
        &self,
        xq: Mat,
        q_segs: &Segments,
        xkv: Mat,
        kv_segs: &Segments,
        mask: AttnMask<'_>,
        n_heads: usize,
    ) -> (Mat, AttnCache) {
        assert_eq!(q_segs.len(), kv_segs.len(), "segment count mismatch");
        let q = self.q.forward(&xq.view());
        let k = self.k.forward(&xkv.view());
        let v = self.v.forward(&xkv.view());
        let d = q.ncols();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Mat::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(q_segs.len() * n_heads);
        for (&(qs, ql), &(ks, kl)) in q_segs.iter().zip(kv_segs) {
            for h in 0..n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(s![qs..qs + ql, h * dh..(h + 1) * dh]);
                let kh = k.slice(s![ks..ks + kl, h * dh..(h + 1) * dh]);
                let vh = v.slice(s![ks..ks + kl, h * dh..(h + 1) * dh]);
                let mut p = qh.dot(&kh.t());
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let mut max = f64::NEG_INFINITY;
                    for (j, x) in row.iter_mut().enumerate() {
                        let hidden = (mask.causal && j > i)
                            || mask.key_valid.is_some_and(|kv| !kv[ks + j]);
                        *x = if hidden { f64::NEG_INFINITY } else { *x * scale };
                        max = max.max(*x);
                    }
                    if max == f64::NEG_INFINITY {
                        row.fill(0.0);
                        continue;
                    }
                    let mut sum = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    row /= sum;
                }
                let out = p.dot(&vh);
                ctx.slice_mut(s![qs..qs + ql, ..])
                    .slice_mut(cols)
                    .assign(&out);
                probs.push(p);
            }
        }
        let y = self.o.forward(&ctx.view());
        let cache = AttnCache {
            xq,
            xkv,
            q,
            k,
            v,
            probs,
            ctx,
            q_segs: q_segs.clone(),
            kv_segs: kv_segs.clone(),
        };
        (y, cache)
    }

    /// Returns `(dL/dxq, dL/dxkv)`.
    pub fn backward(&self, cache: &AttnCache, dy: &Mat, grad: &mut Attention) -> (Mat, Mat) {
        let dctx = self.o.backward(&cache.ctx.view(), dy, &mut grad.o);
        let d = cache.q.ncols();
        let n_heads = cache.probs.len() / cache.q_segs.len().max(1);
        let dh = d / n_heads.max(1);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Mat::zeros(cache.q.raw_dim());
        let mut dk = Mat::zeros(cache.k.raw_dim());
        let mut dv = Mat::zeros(cache.v.raw_dim());
        for (seg, (&(qs, ql), &(ks, kl))) in cache.q_segs.iter().zip(&cache.kv_segs).enumerate() {
            for h in 0..n_heads {
                let p = &cache.probs[seg * n_heads + h];
                let hc = h * dh..(h + 1) * dh;
                let qh = cache.q.slice(s![qs..qs + ql, hc.clone()]);
                let kh = cache.k.slice(s![ks..ks + kl, hc.clone()]);
                let vh = cache.v.slice(s![ks..ks + kl, hc.clone()]);
                let dout = dctx.slice(s![qs..qs + ql, hc.clone()]);
                let mut dp = dout.dot(&vh.t());
                dv.slice_mut(s![ks..ks + kl, hc.clone()])
                    .scaled_add(1.0, &p.t().dot(&dout));
                for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                    let dot = drow.dot(&prow);
                    Zip::from(&mut drow)
                        .and(&prow)
                        .for_each(|g, &pv| *g = pv * (*g - dot) * scale);
                }
                dq.slice_mut(s![qs..qs + ql, hc.clone()])
                    .scaled_add(1.0, &dp.dot(&kh));
                dk.slice_mut(s![ks..ks + kl, hc]).scaled_add(1.0, &dp.t().dot(&qh));
            }
        }
        let dxq = self.q.backward(&cache.xq.view(), &dq, &mut grad.q);
        let mut dxkv = self.k.backward(&cache.xkv.view(), &dk, &mut grad.k);
        dxkv += &self.v.backward(&cache.xkv.view(), &dv, &mut grad.v);
        (dxq, dxkv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Central differences of `sum(w * f(x))` w.r.t. every entry of `x`.
    fn numeric_grad(x: &Mat, w: &Mat, f: impl Fn(&Mat) -> Mat) -> Mat {
        let h = 1e-6;
        let mut g = Mat::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = ((&f(&xp) * w).sum() - (&f(&xm) * w).sum()) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        let diff = (a - b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        let scale = a.mapv(f64::abs).fold(1e-12f64, |m, &v| m.max(v));
        assert!(diff / scale < tol, "max diff {diff}, scale {scale}");
    }

    #[test]
    fn layernorm_input_gradient() {
        let mut r = rng();
        let mut ln = LayerNorm::new(5);
        ln.gamma = normal_init(1, 5, 1.0, &mut r);
        let x = normal_init(3, 5, 1.0, &mut r);
        let w = normal_init(3, 5, 1.0, &mut r);
        let (_, cache) = ln.forward(&x);
        let mut g = LayerNorm::new(5);
        g.zero();
        let dx = ln.backward(&cache, &w, &mut g);
        assert_close(&dx, &numeric_grad(&x, &w, |x| ln.forward(x).0), 1e-6);
    }

    #[test]
    fn gelu_gradient() {
        let mut r = rng();
        let x = normal_init(4, 3, 2.0, &mut r);
        let w = normal_init(4, 3, 1.0, &mut r);
        assert_close(&gelu_backward(&x, &w), &numeric_grad(&x, &w, gelu), 1e-6);
    }

    #[test]
    fn attention_input_gradients_with_masks() {
        let mut r = rng();
        let att = Attention::new(8, &mut r, false);
        let q_segs = segments_from_lens([3, 2]);
        let kv_segs = segments_from_lens([4, 2]);
        let xq = normal_init(5, 8, 1.0, &mut r);
        let xkv = normal_init(6, 8, 1.0, &mut r);
        let valid = [true, false, true, true, true, true];
        let mask = AttnMask {
            causal: false,
            key_valid: Some(&valid),
        };
        let w = normal_init(5, 8, 1.0, &mut r);
        let (_, cache) = att.forward(xq.clone(), &q_segs, xkv.clone(), &kv_segs, mask, 2);
        let mut g = att.clone();
        g.zero();
        let (dxq, dxkv) = att.backward(&cache, &w, &mut g);
        let fq = |x: &Mat| att.forward(x.clone(), &q_segs, xkv.clone(), &kv_segs, mask, 2).0;
        assert_close(&dxq, &numeric_grad(&xq, &w, fq), 1e-6);
        let fkv = |x: &Mat| att.forward(xq.clone(), &q_segs, x.clone(), &kv_segs, mask, 2).0;
        assert_close(&dxkv, &numeric_grad(&xkv, &w, fkv), 1e-6);
        // masked key row receives no gradient
        assert!(dxkv.row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn causal_self_attention_gradient() {
        let mut r = rng();
        let att = Attention::new(4, &mut r, false);
        let segs = segments_from_lens([3, 1]);
        let x = normal_init(4, 4, 1.0, &mut r);
        let w = normal_init(4, 4, 1.0, &mut r);
        let mask = AttnMask {
            causal: true,
            key_valid: None,
        };
        let f = |x: &Mat| att.forward(x.clone(), &segs, x.clone(), &segs, mask, 1).0;
        let (_, cache) = att.forward(x.clone(), &segs, x.clone(), &segs, mask, 1);
        let mut g = att.clone();
        g.zero();
        let (a, b) = att.backward(&cache, &w, &mut g);
        assert_close(&(a + b), &numeric_grad(&x, &w, f), 1e-6);
        // first query of a causal segment attends only to itself
        let y = f(&x);
        let only_self = att.o.forward(&att.v.forward(&x.view()).view());
        assert!((y.row(0).to_owned() - only_self.row(0)).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn linear_parameter_gradient() {
        let mut r = rng();
        let lin = Linear::xavier(3, 2, &mut r);
        let x = normal_init(4, 3, 1.0, &mut r);
        let w = normal_init(4, 2, 1.0, &mut r);
        let mut g = Linear::zeros(3, 2);
        lin.backward(&x.view(), &w, &mut g);
        let num = numeric_grad(&lin.w, &w, |wm| {
            let l = Linear {
                w: wm.clone(),
                b: lin.b.clone(),
            };
            l.forward(&x.view())
        });
        assert_close(&g.w, &num, 1e-6);
    }

    #[test]
    fn params_visit_names() {
        let mut r = rng();
        let mlp = Mlp::new(2, 3, 2, &mut r);
        let names: Vec<String> = mlp.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["fc1.w", "fc1.b", "fc2.w", "fc2.b"]);
        assert_eq!(mlp.param_count(), 2 * 3 + 3 + 3 * 2 + 2);
    }
}
