//! The desk-scale fusion network.
//!
//! Per modality a two-layer encoder (affine, tanh, affine) produces a
//! `channels x spatial` feature map. Dropped modalities are zeroed, the maps
//! are concatenated along channels and projected back to `channels` per
//! position, and two per-position affine heads with batch normalization emit
//! `mu` and `log_sigma`. Training samples `s = mu + eps * sigma`; inference
//! uses `mu`. Pooled means feed a bias-free linear classifier, and the same
//! classifier weights serve the hard-combination loss.
//!
//! Parameters live in one flat `Vec<f64>` described by a [`Layout`] of named
//! groups, which is what the optimizer, the checkpoint format, and the
//! gradient checker iterate over.

mod batch;

pub use batch::{backward_batch, forward_batch, BatchCache, BnForward};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::combinations::{apply_mask, CombinationMask};
use crate::datasynth::MultimodalSample;
use crate::error::{DmrError, Result};
use crate::tensor::FeatureMap;

/// `log_sigma` is clamped to this symmetric range before exponentiation.
pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 10.0;

/// Batch-norm variance guard.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics update rate per training batch.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub modalities: usize,
    /// Input width per modality; length must equal `modalities`.
    pub input_dims: Vec<usize>,
    pub hidden: usize,
    pub channels: usize,
    pub spatial: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.modalities == 0 || self.modalities > 63 {
            return Err(DmrError::InvalidConfig(format!(
                "modalities must be in 1..=63, got {}",
                self.modalities
            )));
        }
        if self.input_dims.len() != self.modalities {
            return Err(DmrError::InvalidConfig(format!(
                "{} input dims for {} modalities",
                self.input_dims.len(),
                self.modalities
            )));
        }
        if self.input_dims.iter().any(|&d| d == 0) {
            return Err(DmrError::InvalidConfig("zero-width modality input".into()));
        }
        if self.hidden == 0 || self.channels == 0 || self.spatial == 0 {
            return Err(DmrError::InvalidConfig(
                "hidden, channels and spatial must all be positive".into(),
            ));
        }
        if self.classes < 2 {
            return Err(DmrError::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    /// Zero-mean normal with `1/sqrt(fan_in)` standard deviation.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct GroupInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    init: InitKind,
}

/// Handle into [`Layout::groups`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupId(usize);

#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub weight: GroupId,
    pub bias: GroupId,
    pub gamma: GroupId,
    pub beta: GroupId,
}

/// Named parameter groups laid out contiguously in one flat vector.
#[derive(Debug, Clone)]
pub struct Layout {
    groups: Vec<GroupInfo>,
    total: usize,
    enc_w1: Vec<GroupId>,
    enc_b1: Vec<GroupId>,
    enc_w2: Vec<GroupId>,
    enc_b2: Vec<GroupId>,
    fusion_w: GroupId,
    fusion_b: GroupId,
    pub head_mu: HeadIds,
    pub head_sigma: HeadIds,
    classifier: GroupId,
}

impl Layout {
    pub(crate) fn build(dims: &ModelDims) -> Layout {
        let mut groups = Vec::new();
        let mut total = 0usize;
        let mut push = |name: String, shape: Vec<usize>, init: InitKind| -> GroupId {
            let len = shape.iter().product();
            let id = GroupId(groups.len());
            groups.push(GroupInfo {
                name,
                shape,
                offset: total,
                len,
                init,
            });
            total += len;
            id
        };

        let (c, s, k) = (dims.channels, dims.spatial, dims.hidden);
        let mut enc_w1 = Vec::new();
        let mut enc_b1 = Vec::new();
        let mut enc_w2 = Vec::new();
        let mut enc_b2 = Vec::new();
        for (v, &d) in dims.input_dims.iter().enumerate() {
            enc_w1.push(push(format!("encoder{v}.w1"), vec![k, d], InitKind::FanIn(d)));
            enc_b1.push(push(format!("encoder{v}.b1"), vec![k], InitKind::Zeros));
            enc_w2.push(push(format!("encoder{v}.w2"), vec![c * s, k], InitKind::FanIn(k)));
            enc_b2.push(push(format!("encoder{v}.b2"), vec![c * s], InitKind::Zeros));
        }
        let fusion_w = push(
            "fusion.weight".into(),
            vec![c, dims.modalities * c],
            InitKind::FanIn(dims.modalities * c),
        );
        let fusion_b = push("fusion.bias".into(), vec![c], InitKind::Zeros);

        let mut head = |tag: &str, gamma_init: InitKind| HeadIds {
            weight: push(format!("head_{tag}.weight"), vec![c, c], InitKind::FanIn(c)),
            bias: push(format!("head_{tag}.bias"), vec![c], InitKind::Zeros),
            gamma: push(format!("head_{tag}.gamma"), vec![c], gamma_init),
            beta: push(format!("head_{tag}.beta"), vec![c], InitKind::Zeros),
        };
        // Both heads start with unit scale, so the initial log-sigma field
        // inherits the spread of its normalized activations and the KL term
        // has something to pull toward zero.
        let head_mu = head("mu", InitKind::Ones);
        let head_sigma = head("sigma", InitKind::Ones);

        let classifier = push(
            "classifier.weight".into(),
            vec![dims.classes, c],
            InitKind::FanIn(c),
        );

        Layout {
            groups,
            total,
            enc_w1,
            enc_b1,
            enc_w2,
            enc_b2,
            fusion_w,
            fusion_b,
            head_mu,
            head_sigma,
            classifier,
        }
    }

    pub fn groups(&self) -> &[GroupInfo] {
        &self.groups
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn slice<'a>(&self, id: GroupId, data: &'a [f64]) -> &'a [f64] {
        let g = &self.groups[id.0];
        &data[g.offset..g.offset + g.len]
    }

    pub fn slice_mut<'a>(&self, id: GroupId, data: &'a mut [f64]) -> &'a mut [f64] {
        let g = &self.groups[id.0];
        &mut data[g.offset..g.offset + g.len]
    }

    pub fn offset(&self, id: GroupId) -> usize {
        self.groups[id.0].offset
    }

    pub fn info(&self, id: GroupId) -> &GroupInfo {
        &self.groups[id.0]
    }

    pub fn enc_w1(&self, v: usize) -> GroupId {
        self.enc_w1[v]
    }
    pub fn enc_b1(&self, v: usize) -> GroupId {
        self.enc_b1[v]
    }
    pub fn enc_w2(&self, v: usize) -> GroupId {
        self.enc_w2[v]
    }
    pub fn enc_b2(&self, v: usize) -> GroupId {
        self.enc_b2[v]
    }
    pub fn fusion_w(&self) -> GroupId {
        self.fusion_w
    }
    pub fn fusion_b(&self) -> GroupId {
        self.fusion_b
    }
    pub fn classifier(&self) -> GroupId {
        self.classifier
    }
}

/// Batch-norm running statistics for the two heads. Buffers, not parameters:
/// the optimizer never touches them but checkpoints must.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBuffers {
    pub mu_mean: Vec<f64>,
    pub mu_var: Vec<f64>,
    pub sigma_mean: Vec<f64>,
    pub sigma_var: Vec<f64>,
}

impl BnBuffers {
    pub fn fresh(channels: usize) -> Self {
        BnBuffers {
            mu_mean: vec![0.0; channels],
            mu_var: vec![1.0; channels],
            sigma_mean: vec![0.0; channels],
            sigma_var: vec![1.0; channels],
        }
    }
}

/// Gaussian feature-map embedding: per-element `N(mu, sigma^2)` with
/// `log_sigma` already clamped to the supported range.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEmbedding {
    pub mu: FeatureMap,
    pub log_sigma: FeatureMap,
}

impl GaussianEmbedding {
    pub fn sigma(&self) -> FeatureMap {
        let data = self.log_sigma.iter().map(|&l| l.exp()).collect();
        FeatureMap::from_vec(self.log_sigma.channels(), self.log_sigma.positions(), data)
            .expect("sigma inherits log_sigma's shape")
    }

    /// Mean of `sigma^2` over all elements.
    pub fn mean_sigma_sq(&self) -> f64 {
        let n = self.log_sigma.len() as f64;
        self.log_sigma.iter().map(|&l| (2.0 * l).exp()).sum::<f64>() / n
    }
}

/// Which statistics normalize the head activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormSource {
    /// Mean/variance of the activations in the current call (training mode).
    Minibatch,
    /// Stored running statistics (inference mode).
    Frozen,
}

/// Everything the training step needs from one sample's forward pass.
#[derive(Debug, Clone)]
pub struct TrainForward {
    pub logits: Vec<f64>,
    pub embedding: GaussianEmbedding,
    pub sampled: FeatureMap,
    pub pooled: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    dims: ModelDims,
    layout: Layout,
    pub params: Vec<f64>,
    pub bn: BnBuffers,
}

impl Model {
    /// Initialize with fan-in scaled normal weights from `rng`. The draw
    /// order is the layout order, so identical seeds give identical models.
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Model> {
        dims.validate()?;
        let layout = Layout::build(&dims);
        let mut params = vec![0.0; layout.total_len()];
        for g in layout.groups() {
            let slot = &mut params[g.offset..g.offset + g.len];
            match g.init {
                InitKind::FanIn(fan) => {
                    let sd = (1.0 / fan as f64).sqrt();
                    for p in slot {
                        let z: f64 = rng.sample(StandardNormal);
                        *p = z * sd;
                    }
                }
                InitKind::Zeros => {}
                InitKind::Ones => slot.fill(1.0),
            }
        }
        let bn = BnBuffers::fresh(dims.channels);
        Ok(Model {
            dims,
            layout,
            params,
            bn,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn group(&self, id: GroupId) -> &[f64] {
        self.layout.slice(id, &self.params)
    }

    /// Encoder for modality `v`: affine, tanh, affine, reshaped to a map.
    pub fn encode_modality(&self, v: usize, x: &[f64]) -> Result<FeatureMap> {
        if v >= self.dims.modalities {
            return Err(DmrError::InvalidInput(format!(
                "modality {v} out of range for {} modalities",
                self.dims.modalities
            )));
        }
        if x.len() != self.dims.input_dims[v] {
            return Err(DmrError::InvalidInput(format!(
                "modality {v} expects {} inputs, got {}",
                self.dims.input_dims[v],
                x.len()
            )));
        }
        let hidden = self.encode_hidden(v, x);
        Ok(self.encode_from_hidden(v, &hidden))
    }

    pub(crate) fn encode_hidden(&self, v: usize, x: &[f64]) -> Vec<f64> {
        let k = self.dims.hidden;
        let d = self.dims.input_dims[v];
        let w1 = self.group(self.layout.enc_w1[v]);
        let b1 = self.group(self.layout.enc_b1[v]);
        let mut h = vec![0.0; k];
        for j in 0..k {
            let mut acc = b1[j];
            let row = &w1[j * d..(j + 1) * d];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            h[j] = acc.tanh();
        }
        h
    }

    pub(crate) fn encode_from_hidden(&self, v: usize, h: &[f64]) -> FeatureMap {
        let k = self.dims.hidden;
        let out = self.dims.channels * self.dims.spatial;
        let w2 = self.group(self.layout.enc_w2[v]);
        let b2 = self.group(self.layout.enc_b2[v]);
        let mut r = vec![0.0; out];
        for j in 0..out {
            let mut acc = b2[j];
            let row = &w2[j * k..(j + 1) * k];
            for (wi, hi) in row.iter().zip(h) {
                acc += wi * hi;
            }
            r[j] = acc;
        }
        FeatureMap::from_vec(self.dims.channels, self.dims.spatial, r)
            .expect("encoder output length is channels*spatial")
    }

    /// Channel-concatenate the (already masked) per-modality maps and project
    /// back to `channels` per position. Dropped slots contribute exact zeros,
    /// so permuting them cannot change the output.
    pub fn fuse(&self, masked: &[FeatureMap]) -> Result<FeatureMap> {
        let (v, c, s) = (self.dims.modalities, self.dims.channels, self.dims.spatial);
        if masked.len() != v {
            return Err(DmrError::InvalidInput(format!(
                "fuse expects {v} maps, got {}",
                masked.len()
            )));
        }
        for (i, m) in masked.iter().enumerate() {
            if m.channels() != c || m.positions() != s {
                return Err(DmrError::InvalidInput(format!(
                    "modality {i} map is {}x{}, expected {c}x{s}",
                    m.channels(),
                    m.positions()
                )));
            }
        }
        let wf = self.group(self.layout.fusion_w);
        let bf = self.group(self.layout.fusion_b);
        let mut z = FeatureMap::zeros(c, s);
        for co in 0..c {
            let row = &wf[co * v * c..(co + 1) * v * c];
            for pos in 0..s {
                let mut acc = bf[co];
                for (vi, map) in masked.iter().enumerate() {
                    for ci in 0..c {
                        acc += row[vi * c + ci] * map.get(ci, pos);
                    }
                }
                z.set(co, pos, acc);
            }
        }
        Ok(z)
    }

    fn head_affine(&self, ids: &HeadIds, z: &FeatureMap) -> FeatureMap {
        let (c, s) = (self.dims.channels, self.dims.spatial);
        let w = self.group(ids.weight);
        let b = self.group(ids.bias);
        let mut a = FeatureMap::zeros(c, s);
        for co in 0..c {
            let row = &w[co * c..(co + 1) * c];
            for pos in 0..s {
                let mut acc = b[co];
                for ci in 0..c {
                    acc += row[ci] * z.get(ci, pos);
                }
                a.set(co, pos, acc);
            }
        }
        a
    }

    fn head_normalize(
        &self,
        ids: &HeadIds,
        a: &FeatureMap,
        norm: NormSource,
        running: (&[f64], &[f64]),
    ) -> FeatureMap {
        let (c, s) = (self.dims.channels, self.dims.spatial);
        let gamma = self.group(ids.gamma);
        let beta = self.group(ids.beta);
        let mut out = FeatureMap::zeros(c, s);
        for ch in 0..c {
            let (mean, var) = match norm {
                NormSource::Minibatch => {
                    let row = a.channel(ch);
                    let m = row.iter().sum::<f64>() / s as f64;
                    let v = row.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / s as f64;
                    (m, v)
                }
                NormSource::Frozen => (running.0[ch], running.1[ch]),
            };
            let inv = 1.0 / (var + BN_EPS).sqrt();
            for pos in 0..s {
                let xhat = (a.get(ch, pos) - mean) * inv;
                out.set(ch, pos, gamma[ch] * xhat + beta[ch]);
            }
        }
        out
    }

    /// Per-position affine heads with normalization produce the Gaussian
    /// embedding. `Minibatch` here means statistics over this single map's
    /// positions; the batched training path pools statistics over the whole
    /// batch instead.
    pub fn estimate_distribution(&self, z: &FeatureMap, norm: NormSource) -> Result<GaussianEmbedding> {
        if z.channels() != self.dims.channels || z.positions() != self.dims.spatial {
            return Err(DmrError::InvalidInput(format!(
                "fused map is {}x{}, expected {}x{}",
                z.channels(),
                z.positions(),
                self.dims.channels,
                self.dims.spatial
            )));
        }
        let a_mu = self.head_affine(&self.layout.head_mu, z);
        let mu = self.head_normalize(
            &self.layout.head_mu,
            &a_mu,
            norm,
            (&self.bn.mu_mean, &self.bn.mu_var),
        );
        let a_sg = self.head_affine(&self.layout.head_sigma, z);
        let raw = self.head_normalize(
            &self.layout.head_sigma,
            &a_sg,
            norm,
            (&self.bn.sigma_mean, &self.bn.sigma_var),
        );
        let clamped: Vec<f64> = raw
            .iter()
            .map(|&l| l.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX))
            .collect();
        let log_sigma = FeatureMap::from_vec(raw.channels(), raw.positions(), clamped)?;
        Ok(GaussianEmbedding { mu, log_sigma })
    }

    /// Classifier logits from a pooled vector; no bias term, and the same
    /// weights back both the task loss and the hard-combination loss.
    pub fn predict(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        if pooled.len() != self.dims.channels {
            return Err(DmrError::InvalidInput(format!(
                "pooled vector has {} entries, expected {}",
                pooled.len(),
                self.dims.channels
            )));
        }
        let w = self.group(self.layout.classifier);
        let c = self.dims.channels;
        Ok((0..self.dims.classes)
            .map(|k| {
                w[k * c..(k + 1) * c]
                    .iter()
                    .zip(pooled)
                    .map(|(wi, gi)| wi * gi)
                    .sum()
            })
            .collect())
    }

    /// Sampled training path for one sample: encode, mask, fuse, embed,
    /// reparameterize with exactly one `eps` draw, pool, predict.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        sample: &MultimodalSample,
        mask: &CombinationMask,
        rng: &mut R,
    ) -> Result<TrainForward> {
        let eps = standard_normal_map(self.dims.channels, self.dims.spatial, rng);
        self.forward_train_with_eps(sample, mask, Some(&eps))
    }

    /// Training path with a caller-supplied noise map; `None` pins `s := mu`
    /// (the vanilla baseline and the degeneracy tests).
    pub fn forward_train_with_eps(
        &self,
        sample: &MultimodalSample,
        mask: &CombinationMask,
        eps: Option<&FeatureMap>,
    ) -> Result<TrainForward> {
        let embedding = self.embed(sample, mask, NormSource::Minibatch)?;
        let sampled = match eps {
            Some(e) => reparameterize(&embedding, e)?,
            None => embedding.mu.clone(),
        };
        let pooled = pool_and_flatten(&sampled);
        let logits = self.predict(&pooled)?;
        Ok(TrainForward {
            logits,
            embedding,
            sampled,
            pooled,
        })
    }

    /// Deterministic inference path: mean embedding under frozen statistics,
    /// no randomness consumed.
    pub fn forward_infer(&self, sample: &MultimodalSample, mask: &CombinationMask) -> Result<Vec<f64>> {
        let embedding = self.embed(sample, mask, NormSource::Frozen)?;
        let pooled = pool_and_flatten(&embedding.mu);
        self.predict(&pooled)
    }

    /// Shared front half of both paths: encode, mask, fuse, embed.
    pub fn embed(
        &self,
        sample: &MultimodalSample,
        mask: &CombinationMask,
        norm: NormSource,
    ) -> Result<GaussianEmbedding> {
        if mask.modality_count() != self.dims.modalities {
            return Err(DmrError::InvalidInput(format!(
                "mask covers {} modalities, model has {}",
                mask.modality_count(),
                self.dims.modalities
            )));
        }
        if sample.modalities.len() != self.dims.modalities {
            return Err(DmrError::InvalidInput(format!(
                "sample has {} modalities, model has {}",
                sample.modalities.len(),
                self.dims.modalities
            )));
        }
        let feats: Result<Vec<FeatureMap>> = (0..self.dims.modalities)
            .map(|v| self.encode_modality(v, &sample.modalities[v]))
            .collect();
        let masked = apply_mask(&feats?, mask)?;
        let z = self.fuse(&masked)?;
        self.estimate_distribution(&z, norm)
    }
}

/// `s = mu + eps * exp(log_sigma)`, elementwise.
pub fn reparameterize(g: &GaussianEmbedding, eps: &FeatureMap) -> Result<FeatureMap> {
    if eps.channels() != g.mu.channels() || eps.positions() != g.mu.positions() {
        return Err(DmrError::InvalidInput(format!(
            "eps map is {}x{}, embedding is {}x{}",
            eps.channels(),
            eps.positions(),
            g.mu.channels(),
            g.mu.positions()
        )));
    }
    let data: Vec<f64> = g
        .mu
        .iter()
        .zip(g.log_sigma.iter())
        .zip(eps.iter())
        .map(|((&m, &l), &e)| m + e * l.exp())
        .collect();
    FeatureMap::from_vec(g.mu.channels(), g.mu.positions(), data)
}

/// Mean over positions per channel.
pub fn pool_and_flatten(map: &FeatureMap) -> Vec<f64> {
    let s = map.positions() as f64;
    (0..map.channels())
        .map(|c| map.channel(c).iter().sum::<f64>() / s)
        .collect()
}

/// One `channels x positions` map of independent standard normals.
pub fn standard_normal_map<R: Rng + ?Sized>(channels: usize, positions: usize, rng: &mut R) -> FeatureMap {
    let data: Vec<f64> = (0..channels * positions)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    FeatureMap::from_vec(channels, positions, data).expect("length matches by construction")
}
