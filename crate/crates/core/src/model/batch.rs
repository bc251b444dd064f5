//! Batched training-path forward and hand-written backward.
//!
//! The training loop and the gradient checker share these two functions, so
//! the backward pass here is the single definition of the analytic gradient.
//! `forward_batch` never mutates the model: batch-norm running statistics
//! come back in the cache and the caller decides whether to adopt them. That
//! keeps repeated finite-difference evaluations side-effect free.

use std::collections::BTreeSet;

use crate::combinations::CombinationMask;
use crate::datasynth::MultimodalSample;
use crate::error::{DmrError, Result};
use crate::losses;
use crate::model::{
    BnBuffers, Model, NormSource, BN_EPS, BN_MOMENTUM, LOG_SIGMA_MAX, LOG_SIGMA_MIN,
};
use crate::tensor::FeatureMap;

/// One head's normalization record: the statistics actually used and the
/// normalized activations, everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct BnForward {
    pub xhat: Vec<FeatureMap>,
    pub invstd: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Whether the statistics were computed from this batch (training mode).
    pub minibatch: bool,
}

/// Every intermediate of one batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchCache {
    pub masks: Vec<CombinationMask>,
    pub labels: Vec<usize>,
    /// Input vectors, `[sample][modality]`.
    pub xs: Vec<Vec<Vec<f64>>>,
    /// Tanh activations, `[sample][modality][hidden]`.
    pub h: Vec<Vec<Vec<f64>>>,
    /// Encoder outputs after masking, `[sample][modality]`.
    pub masked: Vec<Vec<FeatureMap>>,
    pub z: Vec<FeatureMap>,
    pub bn_mu: BnForward,
    pub bn_sigma: BnForward,
    pub mu: Vec<FeatureMap>,
    /// Sigma-head output before clamping; the clamp gate in backward reads it.
    pub raw_log_sigma: Vec<FeatureMap>,
    pub log_sigma: Vec<FeatureMap>,
    pub eps: Option<Vec<FeatureMap>>,
    pub pooled: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    /// Per-sample cross entropy on the (sampled or mean) path.
    pub ce: Vec<f64>,
    /// Per-sample KL regularizer, mean over map elements.
    pub kl: Vec<f64>,
    /// Running statistics after this batch; identical to the model's when the
    /// forward ran with frozen statistics.
    pub new_running: BnBuffers,
}

impl BatchCache {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    /// Batch mean of `sigma^2` over every map element.
    pub fn mean_sigma_sq(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for map in &self.log_sigma {
            sum += map.iter().map(|&l| (2.0 * l).exp()).sum::<f64>();
            n += map.len();
        }
        sum / n as f64
    }
}

fn bn_over_batch(
    a: &[FeatureMap],
    gamma: &[f64],
    beta: &[f64],
    norm: NormSource,
    running: (&[f64], &[f64]),
) -> (Vec<FeatureMap>, BnForward) {
    let b = a.len();
    let c = a[0].channels();
    let s = a[0].positions();
    let n = (b * s) as f64;

    let (mean, var) = match norm {
        NormSource::Minibatch => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut acc = 0.0;
                for map in a {
                    acc += map.channel(ch).iter().sum::<f64>();
                }
                let m = acc / n;
                let mut vv = 0.0;
                for map in a {
                    vv += map.channel(ch).iter().map(|&x| (x - m) * (x - m)).sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = vv / n;
            }
            (mean, var)
        }
        NormSource::Frozen => (running.0.to_vec(), running.1.to_vec()),
    };

    let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Vec::with_capacity(b);
    let mut out = Vec::with_capacity(b);
    for map in a {
        let mut xh = FeatureMap::zeros(c, s);
        let mut o = FeatureMap::zeros(c, s);
        for ch in 0..c {
            for pos in 0..s {
                let v = (map.get(ch, pos) - mean[ch]) * invstd[ch];
                xh.set(ch, pos, v);
                o.set(ch, pos, gamma[ch] * v + beta[ch]);
            }
        }
        xhat.push(xh);
        out.push(o);
    }
    (
        out,
        BnForward {
            xhat,
            invstd,
            mean,
            var,
            minibatch: matches!(norm, NormSource::Minibatch),
        },
    )
}

/// Run the training-path forward over a batch. `eps = None` pins `s := mu`
/// for every sample (the vanilla baseline). With `NormSource::Minibatch` the
/// head statistics pool over the whole batch and updated running statistics
/// are returned in the cache.
pub fn forward_batch(
    model: &Model,
    samples: &[&MultimodalSample],
    masks: &[CombinationMask],
    eps: Option<&[FeatureMap]>,
    norm: NormSource,
) -> Result<BatchCache> {
    let dims = model.dims().clone();
    let b = samples.len();
    if b == 0 {
        return Err(DmrError::InvalidInput("empty batch".into()));
    }
    if masks.len() != b {
        return Err(DmrError::InvalidInput(format!(
            "{b} samples but {} masks",
            masks.len()
        )));
    }
    if let Some(e) = eps {
        if e.len() != b {
            return Err(DmrError::InvalidInput(format!(
                "{b} samples but {} eps maps",
                e.len()
            )));
        }
        for m in e {
            if m.channels() != dims.channels || m.positions() != dims.spatial {
                return Err(DmrError::InvalidInput("eps map shape mismatch".into()));
            }
        }
    }

    let (c, s, v) = (dims.channels, dims.spatial, dims.modalities);
    let mut xs = Vec::with_capacity(b);
    let mut h = Vec::with_capacity(b);
    let mut masked = Vec::with_capacity(b);
    let mut z = Vec::with_capacity(b);
    let mut labels = Vec::with_capacity(b);

    for (i, sample) in samples.iter().enumerate() {
        if sample.label == 0 || sample.label > dims.classes {
            return Err(DmrError::InvalidInput(format!(
                "label {} outside 1..={}",
                sample.label, dims.classes
            )));
        }
        if masks[i].modality_count() != v {
            return Err(DmrError::InvalidInput("mask modality count mismatch".into()));
        }
        if sample.modalities.len() != v {
            return Err(DmrError::InvalidInput("sample modality count mismatch".into()));
        }
        let mut hi = Vec::with_capacity(v);
        let mut mi = Vec::with_capacity(v);
        for vi in 0..v {
            let x = &sample.modalities[vi];
            if x.len() != dims.input_dims[vi] {
                return Err(DmrError::InvalidInput(format!(
                    "modality {vi} expects {} inputs, got {}",
                    dims.input_dims[vi],
                    x.len()
                )));
            }
            if masks[i].is_active(vi) {
                let hv = model.encode_hidden(vi, x);
                let r = model.encode_from_hidden(vi, &hv);
                hi.push(hv);
                mi.push(r);
            } else {
                // Dropped modalities contribute exact zeros and no gradient,
                // so their encoder never runs.
                hi.push(vec![0.0; dims.hidden]);
                mi.push(FeatureMap::zeros(c, s));
            }
        }
        z.push(model.fuse(&mi)?);
        h.push(hi);
        masked.push(mi);
        xs.push(sample.modalities.clone());
        labels.push(sample.label);
    }

    let layout = model.layout();
    let a_mu: Vec<FeatureMap> = z.iter().map(|zi| model.head_affine(&layout.head_mu, zi)).collect();
    let a_sg: Vec<FeatureMap> = z
        .iter()
        .map(|zi| model.head_affine(&layout.head_sigma, zi))
        .collect();

    let (mu, bn_mu) = bn_over_batch(
        &a_mu,
        layout.slice(layout.head_mu.gamma, &model.params),
        layout.slice(layout.head_mu.beta, &model.params),
        norm,
        (&model.bn.mu_mean, &model.bn.mu_var),
    );
    let (raw_log_sigma, bn_sigma) = bn_over_batch(
        &a_sg,
        layout.slice(layout.head_sigma.gamma, &model.params),
        layout.slice(layout.head_sigma.beta, &model.params),
        norm,
        (&model.bn.sigma_mean, &model.bn.sigma_var),
    );

    let log_sigma: Vec<FeatureMap> = raw_log_sigma
        .iter()
        .map(|m| {
            let data = m.iter().map(|&l| l.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)).collect();
            FeatureMap::from_vec(c, s, data).expect("clamp preserves shape")
        })
        .collect();

    let mut pooled = Vec::with_capacity(b);
    let mut logits = Vec::with_capacity(b);
    let mut probs = Vec::with_capacity(b);
    let mut ce = Vec::with_capacity(b);
    let mut kl = Vec::with_capacity(b);
    for i in 0..b {
        let sampled = match eps {
            Some(e) => {
                let mut m = FeatureMap::zeros(c, s);
                for ch in 0..c {
                    for pos in 0..s {
                        let val = mu[i].get(ch, pos)
                            + e[i].get(ch, pos) * log_sigma[i].get(ch, pos).exp();
                        m.set(ch, pos, val);
                    }
                }
                m
            }
            None => mu[i].clone(),
        };
        let g = super::pool_and_flatten(&sampled);
        let l = model.predict(&g)?;
        let (p, loss) = losses::softmax_and_ce(&l, labels[i])?;
        kl.push(losses::kl_to_standard_normal(
            mu[i].as_slice(),
            log_sigma[i].as_slice(),
        ));
        pooled.push(g);
        logits.push(l);
        probs.push(p);
        ce.push(loss);
    }

    let new_running = match norm {
        NormSource::Minibatch => {
            let blend = |run: &[f64], batch: &[f64]| {
                run.iter()
                    .zip(batch)
                    .map(|(&r, &bv)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * bv)
                    .collect::<Vec<f64>>()
            };
            BnBuffers {
                mu_mean: blend(&model.bn.mu_mean, &bn_mu.mean),
                mu_var: blend(&model.bn.mu_var, &bn_mu.var),
                sigma_mean: blend(&model.bn.sigma_mean, &bn_sigma.mean),
                sigma_var: blend(&model.bn.sigma_var, &bn_sigma.var),
            }
        }
        NormSource::Frozen => model.bn.clone(),
    };

    Ok(BatchCache {
        masks: masks.to_vec(),
        labels,
        xs,
        h,
        masked,
        z,
        bn_mu,
        bn_sigma,
        mu,
        raw_log_sigma,
        log_sigma,
        eps: eps.map(|e| e.to_vec()),
        pooled,
        logits,
        probs,
        ce,
        kl,
        new_running,
    })
}

fn bn_backward(
    dout: &[FeatureMap],
    bnf: &BnForward,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<FeatureMap> {
    let b = dout.len();
    let c = dout[0].channels();
    let s = dout[0].positions();
    let n = (b * s) as f64;

    let mut sum_dout = vec![0.0; c];
    let mut sum_dout_xhat = vec![0.0; c];
    for i in 0..b {
        for ch in 0..c {
            for pos in 0..s {
                let d = dout[i].get(ch, pos);
                sum_dout[ch] += d;
                sum_dout_xhat[ch] += d * bnf.xhat[i].get(ch, pos);
            }
        }
    }
    for ch in 0..c {
        dgamma[ch] += sum_dout_xhat[ch];
        dbeta[ch] += sum_dout[ch];
    }

    let mut da = Vec::with_capacity(b);
    for i in 0..b {
        let mut m = FeatureMap::zeros(c, s);
        for ch in 0..c {
            let scale = gamma[ch] * bnf.invstd[ch];
            for pos in 0..s {
                let d = dout[i].get(ch, pos);
                let xh = bnf.xhat[i].get(ch, pos);
                m.set(
                    ch,
                    pos,
                    scale * (d - sum_dout[ch] / n - xh * sum_dout_xhat[ch] / n),
                );
            }
        }
        da.push(m);
    }
    da
}

/// Analytic gradient of `l_ttl + alpha * l_dr + beta * l_hcr` with respect to
/// every parameter, in layout order. Requires a cache produced with
/// minibatch normalization, because the statistic terms are part of the
/// gradient.
pub fn backward_batch(
    model: &Model,
    cache: &BatchCache,
    alpha: f64,
    beta: f64,
    hard: Option<&BTreeSet<u64>>,
) -> Vec<f64> {
    assert!(
        cache.bn_mu.minibatch && cache.bn_sigma.minibatch,
        "backward_batch needs minibatch normalization statistics"
    );
    let dims = model.dims();
    let layout = model.layout();
    let b = cache.batch_size();
    let (c, s, m) = (dims.channels, dims.spatial, dims.classes);
    let inv_b = 1.0 / b as f64;
    let kl_scale = alpha * inv_b / (c * s) as f64;

    let mut grads = vec![0.0; layout.total_len()];

    // Classifier and pooled gradient. The hard-combination loss reuses the
    // same logits, so a hard sample just scales its CE gradient by (1+beta).
    let mut dpool = vec![vec![0.0; c]; b];
    {
        let wcls = layout.slice(layout.classifier(), &model.params);
        let off = layout.offset(layout.classifier());
        for i in 0..b {
            let in_hard = hard.map_or(false, |h| h.contains(&cache.masks[i].index()));
            let w_i = if in_hard { (1.0 + beta) * inv_b } else { inv_b };
            for k in 0..m {
                let target = if k + 1 == cache.labels[i] { 1.0 } else { 0.0 };
                let dl = w_i * (cache.probs[i][k] - target);
                for ch in 0..c {
                    grads[off + k * c + ch] += dl * cache.pooled[i][ch];
                    dpool[i][ch] += dl * wcls[k * c + ch];
                }
            }
        }
    }

    // Through pooling into the sampled map, then splitting into the mu path
    // and (when sampling) the log-sigma path; KL adds directly to both.
    let mut dmu = Vec::with_capacity(b);
    let mut dlog_sigma = Vec::with_capacity(b);
    for i in 0..b {
        let mut dm = FeatureMap::zeros(c, s);
        let mut dl = FeatureMap::zeros(c, s);
        for ch in 0..c {
            let ds = dpool[i][ch] / s as f64;
            for pos in 0..s {
                let l = cache.log_sigma[i].get(ch, pos);
                let sigma = l.exp();
                let mut dmu_e = ds;
                let mut dl_e = 0.0;
                if let Some(eps) = &cache.eps {
                    dl_e += ds * eps[i].get(ch, pos) * sigma;
                }
                dmu_e += kl_scale * cache.mu[i].get(ch, pos);
                dl_e += kl_scale * (sigma * sigma - 1.0);
                // Clamp gate: saturated elements pass no log-sigma gradient.
                let raw = cache.raw_log_sigma[i].get(ch, pos);
                if !(raw > LOG_SIGMA_MIN && raw < LOG_SIGMA_MAX) {
                    dl_e = 0.0;
                }
                dm.set(ch, pos, dmu_e);
                dl.set(ch, pos, dl_e);
            }
        }
        dmu.push(dm);
        dlog_sigma.push(dl);
    }

    // Batch-norm backward for both heads, then through the per-position
    // affine maps into the fused representation.
    let mut dz: Vec<FeatureMap> = (0..b).map(|_| FeatureMap::zeros(c, s)).collect();
    for (head, dout, bnf) in [
        (&layout.head_mu, &dmu, &cache.bn_mu),
        (&layout.head_sigma, &dlog_sigma, &cache.bn_sigma),
    ] {
        let gamma = layout.slice(head.gamma, &model.params).to_vec();
        let off_gamma = layout.offset(head.gamma);
        let off_beta = layout.offset(head.beta);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let da = bn_backward(dout, bnf, &gamma, &mut dgamma, &mut dbeta);
        for ch in 0..c {
            grads[off_gamma + ch] += dgamma[ch];
            grads[off_beta + ch] += dbeta[ch];
        }

        let w = layout.slice(head.weight, &model.params).to_vec();
        let off_w = layout.offset(head.weight);
        let off_b = layout.offset(head.bias);
        for i in 0..b {
            for co in 0..c {
                for pos in 0..s {
                    let d = da[i].get(co, pos);
                    grads[off_b + co] += d;
                    for ci in 0..c {
                        grads[off_w + co * c + ci] += d * cache.z[i].get(ci, pos);
                        let cur = dz[i].get(ci, pos);
                        dz[i].set(ci, pos, cur + d * w[co * c + ci]);
                    }
                }
            }
        }
    }

    // Fusion projection.
    let v = dims.modalities;
    let wf = layout.slice(layout.fusion_w(), &model.params).to_vec();
    let off_wf = layout.offset(layout.fusion_w());
    let off_bf = layout.offset(layout.fusion_b());
    let mut dcat: Vec<Vec<FeatureMap>> = (0..b)
        .map(|_| (0..v).map(|_| FeatureMap::zeros(c, s)).collect())
        .collect();
    for i in 0..b {
        for co in 0..c {
            for pos in 0..s {
                let d = dz[i].get(co, pos);
                grads[off_bf + co] += d;
                for vi in 0..v {
                    for ci in 0..c {
                        let q = vi * c + ci;
                        grads[off_wf + co * v * c + q] += d * cache.masked[i][vi].get(ci, pos);
                        let cur = dcat[i][vi].get(ci, pos);
                        dcat[i][vi].set(ci, pos, cur + d * wf[co * v * c + q]);
                    }
                }
            }
        }
    }

    // Encoders, active modalities only: dropped ones saw exact zeros.
    let k = dims.hidden;
    for i in 0..b {
        for vi in 0..v {
            if !cache.masks[i].is_active(vi) {
                continue;
            }
            let w2 = layout.slice(layout.enc_w2(vi), &model.params);
            let off_w2 = layout.offset(layout.enc_w2(vi));
            let off_b2 = layout.offset(layout.enc_b2(vi));
            let off_w1 = layout.offset(layout.enc_w1(vi));
            let off_b1 = layout.offset(layout.enc_b1(vi));
            let d_in = dims.input_dims[vi];

            let mut dh = vec![0.0; k];
            for ch in 0..c {
                for pos in 0..s {
                    let j = ch * s + pos;
                    let dp2 = dcat[i][vi].get(ch, pos);
                    grads[off_b2 + j] += dp2;
                    let h_row = &cache.h[i][vi];
                    for kk in 0..k {
                        grads[off_w2 + j * k + kk] += dp2 * h_row[kk];
                        dh[kk] += dp2 * w2[j * k + kk];
                    }
                }
            }
            let x = &cache.xs[i][vi];
            for kk in 0..k {
                let hv = cache.h[i][vi][kk];
                let dp1 = dh[kk] * (1.0 - hv * hv);
                grads[off_b1 + kk] += dp1;
                for dd in 0..d_in {
                    grads[off_w1 + kk * d_in + dd] += dp1 * x[dd];
                }
            }
        }
    }

    grads
}
