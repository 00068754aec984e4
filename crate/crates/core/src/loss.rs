//! Training loss and the KL alignment term, with their gradients.

use crate::error::{Error, Result};
use crate::tensor::{softmax, Tensor};

/// Mean negative log-softmax of the true class.
///
/// Returns the scalar loss and its gradient with respect to the logits,
/// which is `(softmax - onehot) / batch`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "cross_entropy: expected batch x classes logits, got shape {:?}",
            logits.shape()
        )));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(Error::Dimension(format!(
            "cross_entropy: {} labels for batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!(
            "cross_entropy: label {bad} out of range for {classes} classes"
        )));
    }
    let probs = softmax(logits, 1)?;
    let mut loss = 0.0;
    let mut grad = probs.data().to_vec();
    for (r, &label) in labels.iter().enumerate() {
        let p = probs.data()[r * classes + label];
        // max-subtracted softmax keeps p strictly positive for finite logits
        loss -= p.ln();
        grad[r * classes + label] -= 1.0;
    }
    loss /= batch as f64;
    for g in grad.iter_mut() {
        *g /= batch as f64;
    }
    Ok((loss, Tensor::new(vec![batch, classes], grad)?))
}

/// KL divergence between softmax distributions taken along `axis`,
/// averaged over all remaining positions.
///
/// Returns `(value, grad wrt p_logits, grad wrt q_logits)`. Softmax
/// temperature is fixed at 1.
pub fn kl_divergence(
    p_logits: &Tensor,
    q_logits: &Tensor,
    axis: usize,
) -> Result<(f64, Tensor, Tensor)> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::Dimension(format!(
            "kl_divergence: shape {:?} vs {:?}",
            p_logits.shape(),
            q_logits.shape()
        )));
    }
    let shape = p_logits.shape();
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "kl_divergence: axis {axis} out of range for shape {shape:?}"
        )));
    }
    let p = softmax(p_logits, axis)?;
    let q = softmax(q_logits, axis)?;
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let positions = (outer * inner) as f64;

    let mut total = 0.0;
    let mut grad_p = vec![0.0; p.len()];
    let mut grad_q = vec![0.0; p.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * axis_len * inner + j * inner + i;
            let mut kl = 0.0;
            for j in 0..axis_len {
                let (pj, qj) = (p.data()[idx(j)], q.data()[idx(j)]);
                kl += pj * (pj.ln() - qj.ln());
            }
            total += kl;
            for j in 0..axis_len {
                let (pj, qj) = (p.data()[idx(j)], q.data()[idx(j)]);
                // d/da_j sum_i p_i (ln p_i - ln q_i)  with p = softmax(a)
                grad_p[idx(j)] = pj * ((pj.ln() - qj.ln()) - kl) / positions;
                grad_q[idx(j)] = (qj - pj) / positions;
            }
        }
    }
    Ok((
        total / positions,
        Tensor::new(shape.to_vec(), grad_p)?,
        Tensor::new(shape.to_vec(), grad_q)?,
    ))
}

/// KL divergence `KL(N_p || N_q)` between diagonal-Gaussian fits of two
/// activation batches. Per feature dimension (the last axis), mean and
/// variance are estimated over all other positions; the per-dimension KLs
/// are averaged. Unlike a softmax-based divergence this is sensitive to
/// mean and scale drift of the representation, and it is zero with zero
/// gradient exactly when the fitted moments agree.
///
/// Returns `(value, grad wrt p, grad wrt q)`.
pub fn gaussian_kl(p: &Tensor, q: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    if p.shape() != q.shape() {
        return Err(Error::Dimension(format!(
            "gaussian_kl: shape {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let shape = p.shape();
    let dims = *shape.last().ok_or_else(|| {
        Error::Dimension("gaussian_kl: tensors must have at least one axis".into())
    })?;
    let n = p.len() / dims;
    if n < 2 {
        return Err(Error::Dimension(
            "gaussian_kl: at least 2 batch positions are required to fit a variance".into(),
        ));
    }
    // Variance floor: batch-level variance estimates are noisy and a near
    // zero estimate would make the 1/v terms explode, so both fits are
    // smoothed toward an isotropic component.
    const EPS: f64 = 0.05;
    let nf = n as f64;
    let df = dims as f64;
    let mut total = 0.0;
    let mut grad_p = vec![0.0; p.len()];
    let mut grad_q = vec![0.0; q.len()];
    for d in 0..dims {
        let mut mu_p = 0.0;
        let mut mu_q = 0.0;
        for i in 0..n {
            mu_p += p.data()[i * dims + d] / nf;
            mu_q += q.data()[i * dims + d] / nf;
        }
        let mut v_p = EPS;
        let mut v_q = EPS;
        for i in 0..n {
            v_p += (p.data()[i * dims + d] - mu_p).powi(2) / nf;
            v_q += (q.data()[i * dims + d] - mu_q).powi(2) / nf;
        }
        let delta = mu_p - mu_q;
        total += 0.5 * ((v_q / v_p).ln() + (v_p + delta * delta) / v_q - 1.0);
        let dkl_dmu_p = delta / v_q;
        let dkl_dv_p = 0.5 * (1.0 / v_q - 1.0 / v_p);
        let dkl_dmu_q = -delta / v_q;
        let dkl_dv_q = 0.5 / v_q - 0.5 * (v_p + delta * delta) / (v_q * v_q);
        for i in 0..n {
            let x = p.data()[i * dims + d];
            let y = q.data()[i * dims + d];
            grad_p[i * dims + d] = (dkl_dmu_p / nf + dkl_dv_p * 2.0 * (x - mu_p) / nf) / df;
            grad_q[i * dims + d] = (dkl_dmu_q / nf + dkl_dv_q * 2.0 * (y - mu_q) / nf) / df;
        }
    }
    Ok((
        total / df,
        Tensor::new(shape.to_vec(), grad_p)?,
        Tensor::new(shape.to_vec(), grad_q)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let logits = Tensor::new(vec![2, 4], vec![0.3; 8]).unwrap();
        let (loss, _) = cross_entropy_loss(&logits, &[1, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturates_at_large_margin() {
        let logits = Tensor::new(vec![1, 3], vec![20.0, 0.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy_loss(&logits, &[0]).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            cross_entropy_loss(&logits, &[3]),
            Err(crate::error::Error::Input(_))
        ));
    }

    /// Independent direct summation of -ln softmax.
    #[test]
    fn cross_entropy_direct_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits_v: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let logits = Tensor::new(vec![3, 4], logits_v.clone()).unwrap();
        let labels = [2usize, 0, 3];
        let (loss, grad) = cross_entropy_loss(&logits, &labels).unwrap();
        let mut want = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &logits_v[r * 4..(r + 1) * 4];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[label].exp() / z).ln();
        }
        want /= 3.0;
        assert!((loss - want).abs() < 1e-12);
        // finite differences on a couple of entries
        for &i in &[0usize, 5, 11] {
            let h = 1e-6;
            let mut lp = logits_v.clone();
            lp[i] += h;
            let (l1, _) =
                cross_entropy_loss(&Tensor::new(vec![3, 4], lp.clone()).unwrap(), &labels).unwrap();
            lp[i] -= 2.0 * h;
            let (l0, _) =
                cross_entropy_loss(&Tensor::new(vec![3, 4], lp).unwrap(), &labels).unwrap();
            assert!((grad.data()[i] - (l1 - l0) / (2.0 * h)).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_identical_is_zero() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -0.5, 2.0, 0.1, 0.2, 0.3]).unwrap();
        let (kl, gp, gq) = kl_divergence(&t, &t, 1).unwrap();
        assert!(kl.abs() < 1e-15);
        assert!(gp.data().iter().all(|v| v.abs() < 1e-15));
        assert!(gq.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn kl_direct_value() {
        // p = [0.5, 0.5], q = [0.25, 0.75] as distributions
        let p = Tensor::new(vec![1, 2], vec![0.5f64.ln(), 0.5f64.ln()]).unwrap();
        let q = Tensor::new(vec![1, 2], vec![0.25f64.ln(), 0.75f64.ln()]).unwrap();
        let (kl, _, _) = kl_divergence(&p, &q, 1).unwrap();
        let want = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((kl - want).abs() < 1e-12);
        assert!((want - 0.14384).abs() < 1e-4);
    }

    /// Brute-force double loop for the value, finite differences for grads.
    #[test]
    fn kl_brute_force_and_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let shape = vec![3, 5];
        let a: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pt = Tensor::new(shape.clone(), a.clone()).unwrap();
        let qt = Tensor::new(shape.clone(), b.clone()).unwrap();
        let (kl, gp, gq) = kl_divergence(&pt, &qt, 1).unwrap();

        let mut want = 0.0;
        for r in 0..3 {
            let softmax_row = |v: &[f64]| -> Vec<f64> {
                let z: f64 = v.iter().map(|x| x.exp()).sum();
                v.iter().map(|x| x.exp() / z).collect()
            };
            let p = softmax_row(&a[r * 5..(r + 1) * 5]);
            let q = softmax_row(&b[r * 5..(r + 1) * 5]);
            for j in 0..5 {
                want += p[j] * (p[j] / q[j]).ln();
            }
        }
        want /= 3.0;
        assert!((kl - want).abs() < 1e-12);

        let h = 1e-5;
        for i in 0..15 {
            let mut av = a.clone();
            av[i] += h;
            let (k1, _, _) =
                kl_divergence(&Tensor::new(shape.clone(), av.clone()).unwrap(), &qt, 1).unwrap();
            av[i] -= 2.0 * h;
            let (k0, _, _) =
                kl_divergence(&Tensor::new(shape.clone(), av).unwrap(), &qt, 1).unwrap();
            let fd = (k1 - k0) / (2.0 * h);
            assert!((gp.data()[i] - fd).abs() / fd.abs().max(1e-3) < 1e-4);

            let mut bv = b.clone();
            bv[i] += h;
            let (k1, _, _) =
                kl_divergence(&pt, &Tensor::new(shape.clone(), bv.clone()).unwrap(), 1).unwrap();
            bv[i] -= 2.0 * h;
            let (k0, _, _) =
                kl_divergence(&pt, &Tensor::new(shape.clone(), bv).unwrap(), 1).unwrap();
            let fd = (k1 - k0) / (2.0 * h);
            assert!((gq.data()[i] - fd).abs() / fd.abs().max(1e-3) < 1e-4);
        }
    }

    #[test]
    fn gaussian_kl_identical_batches_zero_value_zero_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::new(vec![6, 4], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let (kl, gp, gq) = gaussian_kl(&t, &t).unwrap();
        assert!(kl.abs() < 1e-12, "{kl}");
        for i in 0..t.len() {
            assert!(gp.data()[i].abs() < 1e-12);
            assert!(gq.data()[i].abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_kl_detects_mean_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 0.5).collect();
        let p = Tensor::new(vec![6, 4], a).unwrap();
        let q = Tensor::new(vec![6, 4], b).unwrap();
        let (kl, _, _) = gaussian_kl(&p, &q).unwrap();
        assert!(kl > 0.01, "{kl}");
    }

    #[test]
    fn gaussian_kl_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = vec![5, 3];
        let a: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pt = Tensor::new(shape.clone(), a.clone()).unwrap();
        let qt = Tensor::new(shape.clone(), b.clone()).unwrap();
        let (_, gp, gq) = gaussian_kl(&pt, &qt).unwrap();
        let h = 1e-6;
        for i in 0..15 {
            let mut av = a.clone();
            av[i] += h;
            let (k1, _, _) =
                gaussian_kl(&Tensor::new(shape.clone(), av.clone()).unwrap(), &qt).unwrap();
            av[i] -= 2.0 * h;
            let (k0, _, _) = gaussian_kl(&Tensor::new(shape.clone(), av).unwrap(), &qt).unwrap();
            let fd = (k1 - k0) / (2.0 * h);
            assert!((gp.data()[i] - fd).abs() / fd.abs().max(1e-3) < 1e-4);

            let mut bv = b.clone();
            bv[i] += h;
            let (k1, _, _) =
                gaussian_kl(&pt, &Tensor::new(shape.clone(), bv.clone()).unwrap()).unwrap();
            bv[i] -= 2.0 * h;
            let (k0, _, _) = gaussian_kl(&pt, &Tensor::new(shape.clone(), bv).unwrap()).unwrap();
            let fd = (k1 - k0) / (2.0 * h);
            assert!((gq.data()[i] - fd).abs() / fd.abs().max(1e-3) < 1e-4);
        }
    }
}
