//! AdamW with decoupled weight decay on linear weight matrices.

use crate::error::{Error, Result};
use crate::nn::{Mat, Params};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    decay: Vec<bool>,
}

/// Linear weight matrices (`*.w`) decay; biases, norms and embeddings do not.
fn decays(name: &str) -> bool {
    name == "w" || name.ends_with(".w")
}

impl AdamW {
    pub fn new<P: Params>(params: &P, lr: f64, weight_decay: f64) -> Self {
        let named = params.named();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: named.iter().map(|(_, p)| Mat::zeros(p.dim())).collect(),
            v: named.iter().map(|(_, p)| Mat::zeros(p.dim())).collect(),
            decay: named.iter().map(|(n, _)| decays(n)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.named();
        let p = params.named_mut();
        if g.len() != self.m.len() || p.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                p.len(),
                g.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (i, ((_, param), (_, grad))) in p.into_iter().zip(g).enumerate() {
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(param)
                .and(grad)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *w -= lr * (update + wd * *w);
                });
        }
        Ok(())
    }
}

/// Adam on a single unconstrained scalar.
#[derive(Debug, Clone)]
pub struct ScalarAdam {
    pub lr: f64,
    step: u64,
    m: f64,
    v: f64,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            m: 0.0,
            v: 0.0,
        }
    }

    pub fn step(&mut self, x: &mut f64, g: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.step += 1;
        let t = self.step as i32;
        self.m = B1 * self.m + (1.0 - B1) * g;
        self.v = B2 * self.v + (1.0 - B2) * g * g;
        let mhat = self.m / (1.0 - B1.powi(t));
        let vhat = self.v / (1.0 - B2.powi(t));
        *x -= self.lr * mhat / (vhat.sqrt() + 1e-8);
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<P: Params>(grads: &mut P, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.visit("", &mut |_, m| sq += m.iter().map(|v| v * v).sum::<f64>());
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.visit_mut("", &mut |_, m| m.mapv_inplace(|v| v * s));
    }
    norm
}
