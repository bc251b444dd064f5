//! Objective terms: task cross entropy, the KL regularizer that keeps each
//! embedding element near `N(0, 1)`, the hard-combination loss that reuses
//! the task classifier, and their weighted total.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::combinations::CombinationMask;
use crate::error::{DmrError, Result};
use crate::model::{BatchCache, GaussianEmbedding, Model};

/// Batch-level loss values. `total` is always assembled as
/// `l_ttl + alpha * l_dr + beta * l_hcr`, in that exact expression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ttl: f64,
    pub l_dr: f64,
    pub l_hcr: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Softmax probabilities and cross entropy in one pass, stabilized by
/// subtracting the max logit. `y` is 1-based.
pub fn softmax_and_ce(logits: &[f64], y: usize) -> Result<(Vec<f64>, f64)> {
    if logits.is_empty() {
        return Err(DmrError::InvalidInput("empty logits".into()));
    }
    if y == 0 || y > logits.len() {
        return Err(DmrError::InvalidInput(format!(
            "label {y} outside 1..={}",
            logits.len()
        )));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / z).collect();
    // ce = logsumexp(logits) - logits[y-1]
    let ce = z.ln() + m - logits[y - 1];
    Ok((probs, ce))
}

/// `-log softmax(logits)[y-1]`, numerically stable.
pub fn cross_entropy(logits: &[f64], y: usize) -> Result<f64> {
    softmax_and_ce(logits, y).map(|(_, ce)| ce)
}

/// Mean over elements of `KL[N(mu, sigma^2) || N(0, 1)]`, i.e.
/// `-(1/2)(1 + log sigma^2 - mu^2 - sigma^2)` averaged over the map.
pub fn kl_to_standard_normal(mu: &[f64], log_sigma: &[f64]) -> f64 {
    debug_assert_eq!(mu.len(), log_sigma.len());
    let n = mu.len() as f64;
    mu.iter()
        .zip(log_sigma)
        .map(|(&m, &l)| -0.5 * (1.0 + 2.0 * l - m * m - (2.0 * l).exp()))
        .sum::<f64>()
        / n
}

/// The distributional regularizer of one embedding.
pub fn distribution_regularizer(g: &GaussianEmbedding) -> f64 {
    kl_to_standard_normal(g.mu.as_slice(), g.log_sigma.as_slice())
}

/// Cross entropy through the shared task classifier if the sample's
/// combination is currently hard, zero otherwise. No separate parameters
/// exist for this loss.
pub fn hard_combination_loss(
    model: &Model,
    pooled_sampled: &[f64],
    y: usize,
    mask: &CombinationMask,
    hard: &BTreeSet<u64>,
) -> Result<f64> {
    if !hard.contains(&mask.index()) {
        return Ok(0.0);
    }
    let logits = model.predict(pooled_sampled)?;
    cross_entropy(&logits, y)
}

/// Combine per-sample terms into the batch objective. `hard_flags[i]` says
/// whether sample i's combination is in the hard set; its CE then counts
/// again under `beta`, averaged over the full batch (zeros included).
pub fn total_loss(
    ce: &[f64],
    kl: &[f64],
    hard_flags: &[bool],
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    let b = ce.len();
    if b == 0 {
        return Err(DmrError::InvalidInput("empty batch".into()));
    }
    if kl.len() != b || hard_flags.len() != b {
        return Err(DmrError::InvalidInput(format!(
            "per-sample term lengths differ: ce={b}, kl={}, hard={}",
            kl.len(),
            hard_flags.len()
        )));
    }
    let inv = 1.0 / b as f64;
    let l_ttl = ce.iter().sum::<f64>() * inv;
    let l_dr = kl.iter().sum::<f64>() * inv;
    let l_hcr = ce
        .iter()
        .zip(hard_flags)
        .map(|(&c, &h)| if h { c } else { 0.0 })
        .sum::<f64>()
        * inv;
    let total = l_ttl + alpha * l_dr + beta * l_hcr;
    Ok(LossBreakdown {
        l_ttl,
        l_dr,
        l_hcr,
        total,
        alpha,
        beta,
    })
}

/// [`total_loss`] over a batched forward cache.
pub fn batch_losses(
    cache: &BatchCache,
    hard: Option<&BTreeSet<u64>>,
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown> {
    let flags: Vec<bool> = cache
        .masks
        .iter()
        .map(|m| hard.map_or(false, |h| h.contains(&m.index())))
        .collect();
    total_loss(&cache.ce, &cache.kl, &flags, alpha, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FeatureMap;
    use rand::Rng;

    #[test]
    fn uniform_logits_cost_ln_classes() {
        let ce = cross_entropy(&[0.7, 0.7, 0.7, 0.7], 3).unwrap();
        assert!((ce - 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logit_costs_almost_nothing() {
        let ce = cross_entropy(&[10.0, -10.0], 1).unwrap();
        // The closed form ln(1 + e^-20) evaluated without the intermediate
        // rounded sum; summing first costs up to one ulp of 1.0.
        let oracle = (-20.0f64).exp().ln_1p();
        assert!(
            (ce - oracle).abs() <= 1e-15,
            "ce {ce:e} vs two-class closed form {oracle:e}"
        );
        assert!((ce - 2.0611536e-9).abs() < 1e-15);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let ce = cross_entropy(&[1e6, -1e6, 0.0], 2).unwrap();
        assert!(ce.is_finite() && ce > 0.0);
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(cross_entropy(&[0.0, 0.0], 0).is_err());
        assert!(cross_entropy(&[0.0, 0.0], 3).is_err());
        assert!(cross_entropy(&[], 1).is_err());
    }

    fn embedding(mu: Vec<f64>, log_sigma: Vec<f64>) -> GaussianEmbedding {
        let n = mu.len();
        GaussianEmbedding {
            mu: FeatureMap::from_vec(1, n, mu).unwrap(),
            log_sigma: FeatureMap::from_vec(1, n, log_sigma).unwrap(),
        }
    }

    #[test]
    fn kl_pinned_values() {
        // Standard normal embedding costs exactly nothing.
        assert_eq!(distribution_regularizer(&embedding(vec![0.0], vec![0.0])), 0.0);
        // mu=1, sigma=1: -(1/2)(1 + 0 - 1 - 1) = 1/2.
        assert_eq!(distribution_regularizer(&embedding(vec![1.0], vec![0.0])), 0.5);
        // mu=0, sigma^2=4: -(1/2)(1 + ln4 - 0 - 4) = 3/2 - ln2.
        let kl = distribution_regularizer(&embedding(vec![0.0], vec![2.0f64.ln()]));
        assert!((kl - (1.5 - 2.0f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn kl_gradient_matches_central_difference() {
        // d/d(log sigma) of the per-element KL is sigma^2 - 1; the training
        // backward pass relies on this closed form.
        let h = 1e-6;
        for &l in &[-0.8, -0.1, 0.0, 0.4, 1.3] {
            let f = |ll: f64| kl_to_standard_normal(&[0.7], &[ll]);
            let numeric = (f(l + h) - f(l - h)) / (2.0 * h);
            let analytic = (2.0 * l).exp() - 1.0;
            assert!(
                (numeric - analytic).abs() < 1e-6,
                "log_sigma {l}: numeric {numeric} vs analytic {analytic}"
            );
        }
        for &m in &[-1.5, 0.0, 2.0] {
            let f = |mm: f64| kl_to_standard_normal(&[mm], &[0.3]);
            let numeric = (f(m + h) - f(m - h)) / (2.0 * h);
            assert!((numeric - m).abs() < 1e-6, "d/dmu must equal mu, got {numeric} at {m}");
        }
    }

    #[test]
    fn kl_closed_form_tracks_monte_carlo() {
        // Small-scale version of the acceptance oracle: estimate
        // E[log p(z)/q(z)] under z ~ N(mu, sigma^2) by simulation.
        let mu = [0.6, -1.1, 0.2, 1.4];
        let log_sigma = [0.3, -0.5, 0.0, 0.8];
        let closed = kl_to_standard_normal(&mu, &log_sigma);

        let mut rng = crate::rng::Stream::derive(99, "kl-mc");
        let draws = 200_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..draws {
            let mut v = 0.0;
            for (&m, &l) in mu.iter().zip(&log_sigma) {
                let e: f64 = rng.sample(rand_distr::StandardNormal);
                let z = m + e * l.exp();
                // log N(z; m, s^2) - log N(z; 0, 1)
                v += -l - 0.5 * e * e + 0.5 * z * z;
            }
            v /= mu.len() as f64;
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / draws as f64;
        let var = (sum_sq / draws as f64 - mean * mean).max(0.0);
        let se = (var / draws as f64).sqrt();
        assert!(
            (closed - mean).abs() <= 4.0 * se,
            "closed form {closed} vs MC {mean} (se {se})"
        );
    }

    #[test]
    fn hard_loss_zero_outside_hard_set() {
        let mut rng = crate::rng::Stream::derive(5, "init");
        let model = Model::new(
            crate::model::ModelDims {
                modalities: 2,
                input_dims: vec![3, 3],
                hidden: 4,
                channels: 2,
                spatial: 2,
                classes: 3,
            },
            &mut rng,
        )
        .unwrap();
        let pooled = vec![0.4, -0.2];
        let in_h = CombinationMask::from_bit_string("10").unwrap();
        let out_h = CombinationMask::from_bit_string("01").unwrap();
        let hard: BTreeSet<u64> = [in_h.index()].into();

        let zero = hard_combination_loss(&model, &pooled, 2, &out_h, &hard).unwrap();
        assert_eq!(zero, 0.0);

        let active = hard_combination_loss(&model, &pooled, 2, &in_h, &hard).unwrap();
        let oracle = cross_entropy(&model.predict(&pooled).unwrap(), 2).unwrap();
        assert_eq!(active, oracle, "hard loss must reuse the task classifier");
        assert!(active > 0.0);
    }

    #[test]
    fn total_is_the_exact_weighted_sum() {
        let ce = [1.2, 0.4, 2.0];
        let kl = [0.3, 0.1, 0.2];
        let hard = [true, false, true];
        let out = total_loss(&ce, &kl, &hard, 1e-3, 0.7).unwrap();
        // Oracles mirror the batch-mean expression term for term, so the
        // comparisons hold bitwise.
        let inv = 1.0 / 3.0;
        assert_eq!(out.l_ttl, (1.2 + 0.4 + 2.0) * inv);
        assert_eq!(out.l_dr, (0.3 + 0.1 + 0.2) * inv);
        assert_eq!(out.l_hcr, (1.2 + 0.0 + 2.0) * inv);
        assert_eq!(out.total, out.l_ttl + 1e-3 * out.l_dr + 0.7 * out.l_hcr);
    }

    #[test]
    fn zero_weights_silence_their_terms() {
        let ce = [1.0, 2.0];
        let kl_a = [5.0, 5.0];
        let kl_b = [0.0, 0.0];
        let hard = [true, true];
        let a = total_loss(&ce, &kl_a, &hard, 0.0, 0.0).unwrap();
        let b = total_loss(&ce, &kl_b, &hard, 0.0, 0.0).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.total, a.l_ttl);
    }

    #[test]
    fn empty_or_mismatched_batches_rejected() {
        assert!(total_loss(&[], &[], &[], 0.1, 0.1).is_err());
        assert!(total_loss(&[1.0], &[0.1, 0.2], &[false], 0.1, 0.1).is_err());
    }
}
