//! In-batch contrastive loss over cosine similarities.
//!
//! `L = 1/B * sum_i -log( exp(tau * k(r_i, t_i)) / sum_j exp(tau * k(r_i, t_j)) )`
//! with `k` the cosine similarity. Row `i` of the query batch is paired with
//! row `i` of the target batch; every other target row is a negative.

use ndarray::Axis;

use crate::error::{Error, Result};
use crate::nn::Mat;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub d_query: Mat,
    pub d_target: Mat,
    pub d_tau: f64,
}

fn check(query: &Mat, target: &Mat, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    if query.dim() != target.dim() {
        return Err(Error::DimensionMismatch(format!(
            "query batch {:?} vs target batch {:?}",
            query.dim(),
            target.dim()
        )));
    }
    if query.nrows() == 0 || query.ncols() == 0 {
        return Err(Error::DimensionMismatch("empty batch".into()));
    }
    Ok(())
}

/// Rows scaled to unit length, plus the original norms.
pub fn normalize_rows(m: &Mat) -> Result<(Mat, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector(i));
        }
        row /= n;
        norms.push(n);
    }
    Ok((out, norms))
}

pub fn contrastive_loss(query: &Mat, target: &Mat, tau: f64) -> Result<f64> {
    Ok(loss_and_gradient(query, target, tau)?.loss)
}

pub fn loss_gradient(query: &Mat, target: &Mat, tau: f64) -> Result<(Mat, Mat)> {
    let out = loss_and_gradient(query, target, tau)?;
    Ok((out.d_query, out.d_target))
}

pub fn loss_and_gradient(query: &Mat, target: &Mat, tau: f64) -> Result<LossOutput> {
    check(query, target, tau)?;
    let b = query.nrows();
    let (qn, q_norms) = normalize_rows(query)?;
    let (tn, t_norms) = normalize_rows(target)?;
    let cos = qn.dot(&tn.t());

    // dL/dlogits = (softmax - I) / B, with max subtraction per row.
    let mut loss = 0.0;
    let mut dlogits = cos.mapv(|c| tau * c);
    for (i, mut row) in dlogits.rows_mut().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let positive = row[i];
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss += max + sum.ln() - positive;
        row /= sum;
        row[i] -= 1.0;
        row /= b as f64;
    }
    let loss = (loss / b as f64).max(0.0);

    let d_tau = (&dlogits * &cos).sum();
    let dcos = dlogits * tau;
    let dqn = dcos.dot(&tn);
    let dtn = dcos.t().dot(&qn);
    Ok(LossOutput {
        loss,
        d_query: normalize_backward(&qn, &q_norms, dqn),
        d_target: normalize_backward(&tn, &t_norms, dtn),
        d_tau,
    })
}

/// Gradient through `x / |x|` row-wise: `(g - xhat (xhat . g)) / |x|`.
fn normalize_backward(xhat: &Mat, norms: &[f64], mut g: Mat) -> Mat {
    let proj = (&g * xhat).sum_axis(Axis(1));
    for (i, mut row) in g.rows_mut().into_iter().enumerate() {
        row.scaled_add(-proj[i], &xhat.row(i));
        row /= norms[i];
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_init;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Plain double loop with no stabilization, for moderate tau only.
    fn naive(q: &Mat, t: &Mat, tau: f64) -> f64 {
        let b = q.nrows();
        let cos = |i: usize, j: usize| {
            let (a, c) = (q.row(i), t.row(j));
            a.dot(&c) / (a.dot(&a).sqrt() * c.dot(&c).sqrt())
        };
        (0..b)
            .map(|i| {
                let denom: f64 = (0..b).map(|j| (tau * cos(i, j)).exp()).sum();
                -((tau * cos(i, i)).exp() / denom).ln()
            })
            .sum::<f64>()
            / b as f64
    }

    #[test]
    fn single_row_batch_is_exactly_zero() {
        let q = array![[0.3, -2.0, 1.0]];
        let t = array![[5.0, 1.0, 0.1]];
        let out = loss_and_gradient(&q, &t, 10.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.d_query.iter().chain(out.d_target.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn orthonormal_pair_closed_form() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let l = contrastive_loss(&e, &e, 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = normal_init(16, 32, 1.0, &mut rng);
        let t = normal_init(16, 32, 1.0, &mut rng);
        let a = contrastive_loss(&q, &t, 3.0).unwrap();
        assert!((a - naive(&q, &t, 3.0)).abs() < 1e-10);
    }

    #[test]
    fn large_temperature_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = normal_init(8, 4, 1.0, &mut rng);
        let t = normal_init(8, 4, 1.0, &mut rng);
        let out = loss_and_gradient(&q, &t, 1e4).unwrap();
        assert!(out.loss.is_finite() && out.loss >= 0.0);
        assert!(out.d_query.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tau_gradient_matches_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = normal_init(5, 3, 1.0, &mut rng);
        let t = normal_init(5, 3, 1.0, &mut rng);
        let h = 1e-6;
        let fd = (contrastive_loss(&q, &t, 2.0 + h).unwrap() - contrastive_loss(&q, &t, 2.0 - h).unwrap())
            / (2.0 * h);
        let out = loss_and_gradient(&q, &t, 2.0).unwrap();
        assert!((fd - out.d_tau).abs() < 1e-7);
    }

    #[test]
    fn errors() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let z = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(matches!(contrastive_loss(&e, &z, 1.0), Err(Error::ZeroVector(1))));
        assert!(matches!(
            contrastive_loss(&e, &e, 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
        assert!(matches!(
            contrastive_loss(&e, &array![[1.0, 0.0]], 1.0),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
