use crate::error::{Error, Result};
use crate::fusion::model::{TAU_MAX, TAU_MIN};
use crate::numerics::tensor::dot;
use crate::numerics::{Real, Tensor};

/// Value and gradients of the batch-wise softmax cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveLoss<F: Real> {
    pub loss: F,
    pub tau: F,
    pub g_queries: Vec<Tensor<F>>,
    pub g_targets: Vec<Tensor<F>>,
    /// Zero while the inverse temperature sits outside the clamp range.
    pub g_log_inv_temperature: F,
}

/// Query-to-target cross-entropy over `logits[i][j] = tau * (q_i . t_j)`, label `i`,
/// averaged over the batch.
pub fn contrastive_loss<F: Real>(
    queries: &[Tensor<F>],
    targets: &[Tensor<F>],
    log_inv_temperature: F,
) -> Result<ContrastiveLoss<F>> {
    let b = queries.len();
    if b < 2 {
        return Err(Error::Data(format!("batch size must be at least 2, got {b}")));
    }
    if targets.len() != b {
        return Err(Error::Dimension(format!("{b} queries but {} targets", targets.len())));
    }
    let d = queries[0].len();
    if let Some(bad) = queries.iter().chain(targets).find(|t| t.len() != d) {
        return Err(Error::Dimension(format!(
            "embedding length {} in a batch of length {d}",
            bad.len()
        )));
    }

    let raw_tau = log_inv_temperature.exp();
    let clamped = !(raw_tau.as_f64() >= TAU_MIN && raw_tau.as_f64() <= TAU_MAX);
    let tau = F::lit(raw_tau.as_f64().clamp(TAU_MIN, TAU_MAX));

    let sims: Vec<Vec<F>> = queries
        .iter()
        .map(|q| targets.iter().map(|t| dot(q.data(), t.data())).collect())
        .collect();

    let inv_b = F::lit(1.0 / b as f64);
    let mut loss = F::zero();
    // g[i][j] = d loss / d logit_ij
    let mut g = vec![vec![F::zero(); b]; b];
    for i in 0..b {
        let logits: Vec<F> = sims[i].iter().map(|&s| tau * s).collect();
        let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum = exps.iter().copied().fold(F::zero(), |a, x| a + x);
        loss += (sum.ln() + max - logits[i]) * inv_b;
        for j in 0..b {
            let onehot = if i == j { F::one() } else { F::zero() };
            g[i][j] = (exps[j] / sum - onehot) * inv_b;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss} at tau {tau}")));
    }

    let mut g_queries = Vec::with_capacity(b);
    for gi in &g {
        let mut out = vec![F::zero(); d];
        for (j, &gij) in gi.iter().enumerate() {
            let c = tau * gij;
            for (o, &t) in out.iter_mut().zip(targets[j].data()) {
                *o += c * t;
            }
        }
        g_queries.push(Tensor::vector(out));
    }
    let mut g_targets = Vec::with_capacity(b);
    for j in 0..b {
        let mut out = vec![F::zero(); d];
        for (i, gi) in g.iter().enumerate() {
            let c = tau * gi[j];
            for (o, &q) in out.iter_mut().zip(queries[i].data()) {
                *o += c * q;
            }
        }
        g_targets.push(Tensor::vector(out));
    }
    let g_log_inv_temperature = if clamped {
        F::zero()
    } else {
        let mut acc = F::zero();
        for i in 0..b {
            for j in 0..b {
                acc += g[i][j] * sims[i][j];
            }
        }
        tau * acc
    };

    Ok(ContrastiveLoss {
        loss,
        tau,
        g_queries,
        g_targets,
        g_log_inv_temperature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_difference_check;
    use rand::Rng as _;

    fn unit(i: usize, d: usize) -> Tensor<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        Tensor::vector(v)
    }

    fn random_unit(rng: &mut crate::rng::Rng, d: usize) -> Tensor<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Tensor::vector(v.into_iter().map(|x| x / n).collect())
    }

    #[test]
    fn orthogonal_matches_closed_form() {
        for b in [2usize, 4, 32] {
            let e: Vec<_> = (0..b).map(|i| unit(i, b)).collect();
            let out = contrastive_loss(&e, &e, 0.0).unwrap();
            let expected = (1.0 + (b as f64 - 1.0) * (-1.0f64).exp()).ln();
            assert!((out.loss - expected).abs() < 1e-12, "{} vs {expected}", out.loss);
        }
    }

    #[test]
    fn identical_embeddings_give_log_b() {
        let v = unit(0, 3);
        let e = vec![v.clone(); 8];
        let out = contrastive_loss(&e, &e, 14.3f64.ln()).unwrap();
        assert!((out.loss - 8f64.ln()).abs() < 1e-12);
    }

    fn reference(q: &[Tensor<f64>], t: &[Tensor<f64>], tau: f64) -> f64 {
        let b = q.len();
        let mut total = 0.0;
        for i in 0..b {
            let logits: Vec<f64> = (0..b)
                .map(|j| tau * q[i].data().iter().zip(t[j].data()).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            total += -(logits[i].exp() / denom).ln();
        }
        total / b as f64
    }

    #[test]
    fn matches_independent_cross_entropy() {
        let mut rng = crate::rng::stream(7, "loss");
        let q: Vec<_> = (0..4).map(|_| random_unit(&mut rng, 6)).collect();
        let t: Vec<_> = (0..4).map(|_| random_unit(&mut rng, 6)).collect();
        let out = contrastive_loss(&q, &t, 3.0f64.ln()).unwrap();
        assert!((out.loss - reference(&q, &t, 3.0)).abs() < 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(8, "loss");
        let (b, d) = (4, 5);
        let q: Vec<_> = (0..b).map(|_| random_unit(&mut rng, d)).collect();
        let t: Vec<_> = (0..b).map(|_| random_unit(&mut rng, d)).collect();
        let lt = 2.5f64.ln();
        let out = contrastive_loss(&q, &t, lt).unwrap();

        let flat = |v: &[Tensor<f64>]| Tensor::new(vec![b, d], v.iter().flat_map(|x| x.data().to_vec()).collect()).unwrap();
        let split = |x: &Tensor<f64>| -> Vec<Tensor<f64>> {
            x.data().chunks(d).map(|c| Tensor::vector(c.to_vec())).collect()
        };

        let err = finite_difference_check(
            |x| {
                let o = contrastive_loss(&split(x), &t, lt).unwrap();
                (o.loss, flat(&o.g_queries))
            },
            &flat(&q),
            1e-6,
        );
        assert!(err < 1e-4, "query grad {err}");

        let err = finite_difference_check(
            |x| {
                let o = contrastive_loss(&q, &split(x), lt).unwrap();
                (o.loss, flat(&o.g_targets))
            },
            &flat(&t),
            1e-6,
        );
        assert!(err < 1e-4, "target grad {err}");

        let err = finite_difference_check(
            |x| {
                let o = contrastive_loss(&q, &t, x.data()[0]).unwrap();
                (o.loss, Tensor::vector(vec![o.g_log_inv_temperature]))
            },
            &Tensor::vector(vec![lt]),
            1e-6,
        );
        assert!(err < 1e-4, "temperature grad {err}");
        assert!(out.g_log_inv_temperature != 0.0);
    }

    #[test]
    fn clamped_temperature_has_no_gradient() {
        let mut rng = crate::rng::stream(9, "loss");
        let q: Vec<_> = (0..3).map(|_| random_unit(&mut rng, 4)).collect();
        let out = contrastive_loss(&q, &q, 200f64.ln()).unwrap();
        assert_eq!(out.tau, 100.0);
        assert_eq!(out.g_log_inv_temperature, 0.0);
        let out = contrastive_loss(&q, &q, -1.0).unwrap();
        assert_eq!(out.tau, 1.0);
        assert_eq!(out.g_log_inv_temperature, 0.0);
    }

    #[test]
    fn random_unit_embeddings_start_near_log_b() {
        let mut rng = crate::rng::stream(10, "loss");
        let b = 32;
        let q: Vec<_> = (0..b).map(|_| random_unit(&mut rng, 64)).collect();
        let t: Vec<_> = (0..b).map(|_| random_unit(&mut rng, 64)).collect();
        let out = contrastive_loss(&q, &t, 0.0).unwrap();
        let lnb = (b as f64).ln();
        assert!((out.loss - lnb).abs() < 0.1 * lnb, "{} vs {lnb}", out.loss);
    }

    #[test]
    fn rejects_small_or_ragged_batches() {
        let v = unit(0, 2);
        assert!(matches!(contrastive_loss(std::slice::from_ref(&v), std::slice::from_ref(&v), 0.0), Err(Error::Data(_))));
        assert!(contrastive_loss(&[v.clone(), v.clone()], std::slice::from_ref(&v), 0.0).is_err());
        assert!(contrastive_loss(&[v.clone(), unit(0, 3)], &[v.clone(), v], 0.0).is_err());
    }
}
