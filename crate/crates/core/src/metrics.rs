//! Evaluation: plain accuracy, ACER for binary anti-spoofing style labels,
//! channel-diversity distances between encoder feature maps, and the
//! per-combination evaluation table.

use serde::{Deserialize, Serialize};

use crate::combinations::{enumerate_combinations, CombinationMask};
use crate::datasynth::MultimodalSample;
use crate::error::{DmrError, Result};
use crate::model::Model;
use crate::parallel;
use crate::tensor::FeatureMap;

/// Fraction of positions where prediction equals truth.
pub fn accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(DmrError::InvalidInput(format!(
            "accuracy needs equal non-empty label vectors, got {} and {}",
            predictions.len(),
            truths.len()
        )));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Average classification error rate over the two binary error types.
/// Label 1 is the attack class, label 2 is bona fide; decisions come from
/// argmax over the binary logits. Both classes must appear in the truths.
pub fn acer(decisions: &[usize], truths: &[usize]) -> Result<f64> {
    if decisions.is_empty() || decisions.len() != truths.len() {
        return Err(DmrError::InvalidInput(format!(
            "acer needs equal non-empty label vectors, got {} and {}",
            decisions.len(),
            truths.len()
        )));
    }
    for &l in decisions.iter().chain(truths) {
        if l != 1 && l != 2 {
            return Err(DmrError::InvalidInput(format!(
                "acer labels must be 1 (attack) or 2 (bona fide), found {l}"
            )));
        }
    }
    let attacks = truths.iter().filter(|&&t| t == 1).count();
    let bonafide = truths.len() - attacks;
    if attacks == 0 || bonafide == 0 {
        return Err(DmrError::UndefinedMetric(
            "acer needs both an attack and a bona fide sample".into(),
        ));
    }
    let attack_misses = decisions
        .iter()
        .zip(truths)
        .filter(|(&d, &t)| t == 1 && d != 1)
        .count();
    let bonafide_misses = decisions
        .iter()
        .zip(truths)
        .filter(|(&d, &t)| t == 2 && d != 2)
        .count();
    let apcer = attack_misses as f64 / attacks as f64;
    let bpcer = bonafide_misses as f64 / bonafide as f64;
    Ok((apcer + bpcer) / 2.0)
}

/// Whether a distance matrix compares a map with itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMode {
    Intra,
    Inter,
}

impl std::fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistanceMode::Intra => "intra",
            DistanceMode::Inter => "inter",
        })
    }
}

/// Two readings of the channel-distance definition. `CosineChannels`
/// normalizes each channel vector and takes `1 - cosine`; `RowNormalizedGram`
/// builds the raw Gram matrix first and L2-normalizes its rows, which makes
/// the diagonal input-dependent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelFormula {
    CosineChannels,
    RowNormalizedGram,
}

impl std::fmt::Display for ChannelFormula {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChannelFormula::CosineChannels => "cosine-channels",
            ChannelFormula::RowNormalizedGram => "row-normalized-gram",
        })
    }
}

impl std::str::FromStr for ChannelFormula {
    type Err = DmrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine-channels" => Ok(ChannelFormula::CosineChannels),
            "row-normalized-gram" => Ok(ChannelFormula::RowNormalizedGram),
            other => Err(DmrError::InvalidConfig(format!(
                "unknown formula {other:?}, expected cosine-channels or row-normalized-gram"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDistanceMatrix {
    channels: usize,
    values: Vec<f64>,
    pub mode: DistanceMode,
    pub formula: ChannelFormula,
}

impl ChannelDistanceMatrix {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.values[k * self.channels + l]
    }

    /// Entries that count toward histograms and means: everything, except
    /// the diagonal in intra mode.
    pub fn included_entries(&self) -> Vec<f64> {
        let c = self.channels;
        let mut out = Vec::with_capacity(c * c);
        for k in 0..c {
            for l in 0..c {
                if self.mode == DistanceMode::Intra && k == l {
                    continue;
                }
                out.push(self.values[k * c + l]);
            }
        }
        out
    }
}

fn channel_norms(map: &FeatureMap) -> Result<Vec<f64>> {
    (0..map.channels())
        .map(|c| {
            let n = map.channel(c).iter().map(|&x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(DmrError::DegenerateChannel(format!(
                    "channel {c} has zero norm"
                )))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Distance between the channel directions of two same-shape feature maps.
/// Intra mode requires both arguments to be the same map and pins the
/// diagonal to exactly zero under the cosine formula.
pub fn channel_distance(
    fm: &FeatureMap,
    fn_: &FeatureMap,
    mode: DistanceMode,
    formula: ChannelFormula,
) -> Result<ChannelDistanceMatrix> {
    if fm.channels() != fn_.channels() || fm.positions() != fn_.positions() {
        return Err(DmrError::InvalidInput(format!(
            "distance needs same-shape maps, got {}x{} and {}x{}",
            fm.channels(),
            fm.positions(),
            fn_.channels(),
            fn_.positions()
        )));
    }
    if mode == DistanceMode::Intra && fm != fn_ {
        return Err(DmrError::InvalidInput(
            "intra mode compares a map with itself".into(),
        ));
    }
    let c = fm.channels();
    let mut values = vec![0.0; c * c];
    match formula {
        ChannelFormula::CosineChannels => {
            let nm = channel_norms(fm)?;
            let nn = channel_norms(fn_)?;
            for k in 0..c {
                for l in 0..c {
                    if mode == DistanceMode::Intra && k == l {
                        continue; // exact zero by definition
                    }
                    let dot: f64 = fm
                        .channel(k)
                        .iter()
                        .zip(fn_.channel(l))
                        .map(|(&a, &b)| a * b)
                        .sum();
                    let cos = dot / (nm[k] * nn[l]);
                    values[k * c + l] = (1.0 - cos).clamp(0.0, 2.0);
                }
            }
        }
        ChannelFormula::RowNormalizedGram => {
            // Raw Gram rows, L2-normalized afterwards.
            let mut gram = vec![0.0; c * c];
            for k in 0..c {
                for l in 0..c {
                    gram[k * c + l] = fm
                        .channel(k)
                        .iter()
                        .zip(fn_.channel(l))
                        .map(|(&a, &b)| a * b)
                        .sum();
                }
            }
            for k in 0..c {
                let row = &gram[k * c..(k + 1) * c];
                let norm = row.iter().map(|&x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(DmrError::DegenerateChannel(format!(
                        "gram row {k} has zero norm"
                    )));
                }
                for l in 0..c {
                    values[k * c + l] = (1.0 - gram[k * c + l] / norm).clamp(0.0, 2.0);
                }
            }
        }
    }
    Ok(ChannelDistanceMatrix {
        channels: c,
        values,
        mode,
        formula,
    })
}

/// Histogram of distance entries over the fixed range `[0, 2]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
    /// `bins + 1` edges spanning exactly `[0, 2]`.
    pub edges: Vec<f64>,
    pub mean: f64,
    pub entries: u64,
    pub mode: DistanceMode,
    pub formula: ChannelFormula,
}

/// Bin the included entries of one or more distance matrices. All matrices
/// must share mode and formula; a value of exactly 2 lands in the last bin.
pub fn diversity_histogram(matrices: &[ChannelDistanceMatrix], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(DmrError::InvalidInput("histogram needs at least one bin".into()));
    }
    let first = matrices
        .first()
        .ok_or_else(|| DmrError::InvalidInput("no distance matrices given".into()))?;
    let (mode, formula) = (first.mode, first.formula);
    if matrices.iter().any(|m| m.mode != mode || m.formula != formula) {
        return Err(DmrError::InvalidInput(
            "histogram inputs mix modes or formulas".into(),
        ));
    }
    let width = 2.0 / bins as f64;
    let mut counts = vec![0u64; bins];
    let mut sum = 0.0;
    let mut entries = 0u64;
    for m in matrices {
        for v in m.included_entries() {
            let mut bin = (v / width) as usize;
            if bin >= bins {
                bin = bins - 1;
            }
            counts[bin] += 1;
            sum += v;
            entries += 1;
        }
    }
    if entries == 0 {
        return Err(DmrError::UndefinedMetric(
            "no entries to histogram (1x1 intra matrix?)".into(),
        ));
    }
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    Ok(Histogram {
        counts,
        edges,
        mean: sum / entries as f64,
        entries,
        mode,
        formula,
    })
}

/// Which scalar the evaluation table reports per combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Accuracy,
    Acer,
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Acer => "acer",
        })
    }
}

impl std::str::FromStr for MetricKind {
    type Err = DmrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(MetricKind::Accuracy),
            "acer" => Ok(MetricKind::Acer),
            other => Err(DmrError::InvalidConfig(format!(
                "unknown metric {other:?}, expected accuracy or acer"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinationRow {
    pub mask: CombinationMask,
    pub value: f64,
    pub n_samples: usize,
}

/// One row per non-empty combination plus the arithmetic mean over rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationResultTable {
    pub metric: MetricKind,
    pub rows: Vec<CombinationRow>,
    pub average: f64,
}

impl CombinationResultTable {
    pub fn row(&self, index: u64) -> Option<&CombinationRow> {
        self.rows.iter().find(|r| r.mask.index() == index)
    }
}

/// Argmax decision, 1-based; ties resolve to the smaller class.
pub fn decide(logits: &[f64]) -> usize {
    let mut best = 0;
    for (k, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = k;
        }
    }
    best + 1
}

fn eval_one_combination(
    model: &Model,
    samples: &[MultimodalSample],
    mask: &CombinationMask,
    metric: MetricKind,
) -> Result<CombinationRow> {
    let mut decisions = Vec::with_capacity(samples.len());
    let mut truths = Vec::with_capacity(samples.len());
    for s in samples {
        let logits = model.forward_infer(s, mask)?;
        decisions.push(decide(&logits));
        truths.push(s.label);
    }
    let value = match metric {
        MetricKind::Accuracy => accuracy(&decisions, &truths)?,
        MetricKind::Acer => acer(&decisions, &truths)?,
    };
    Ok(CombinationRow {
        mask: mask.clone(),
        value,
        n_samples: samples.len(),
    })
}

fn table_from_rows(rows: Vec<Result<CombinationRow>>, metric: MetricKind) -> Result<CombinationResultTable> {
    let rows: Result<Vec<CombinationRow>> = rows.into_iter().collect();
    let rows = rows?;
    let average = rows.iter().map(|r| r.value).sum::<f64>() / rows.len() as f64;
    Ok(CombinationResultTable {
        metric,
        rows,
        average,
    })
}

/// Evaluate the frozen inference path under every non-empty combination.
/// Fans out across combinations; each one only reads the model.
pub fn per_combination_eval(
    model: &Model,
    samples: &[MultimodalSample],
    metric: MetricKind,
) -> Result<CombinationResultTable> {
    if samples.is_empty() {
        return Err(DmrError::InvalidInput("no evaluation samples".into()));
    }
    if metric == MetricKind::Acer && model.dims().classes != 2 {
        return Err(DmrError::UndefinedMetric(format!(
            "acer needs a binary task, model has {} classes",
            model.dims().classes
        )));
    }
    let masks = enumerate_combinations(model.dims().modalities)?;
    let rows = parallel::ordered_map(&masks, |m| eval_one_combination(model, samples, m, metric));
    table_from_rows(rows, metric)
}

/// Sequential twin of [`per_combination_eval`]; benches compare the two.
pub fn per_combination_eval_seq(
    model: &Model,
    samples: &[MultimodalSample],
    metric: MetricKind,
) -> Result<CombinationResultTable> {
    if samples.is_empty() {
        return Err(DmrError::InvalidInput("no evaluation samples".into()));
    }
    if metric == MetricKind::Acer && model.dims().classes != 2 {
        return Err(DmrError::UndefinedMetric(format!(
            "acer needs a binary task, model has {} classes",
            model.dims().classes
        )));
    }
    let masks = enumerate_combinations(model.dims().modalities)?;
    let rows = parallel::ordered_map_seq(&masks, |m| eval_one_combination(model, samples, m, metric));
    table_from_rows(rows, metric)
}

/// Encoder feature maps for every modality of one sample, unmasked.
pub fn modality_feature_maps(model: &Model, sample: &MultimodalSample) -> Result<Vec<FeatureMap>> {
    (0..model.dims().modalities)
        .map(|v| model.encode_modality(v, &sample.modalities[v]))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PairDiversity {
    pub pair: (usize, usize),
    pub histogram: Histogram,
}

/// Channel-distance histogram for each requested modality pair, accumulated
/// over all samples. Pairs are 1-based `(m, n)`; `m == n` is intra mode.
pub fn diversity_summary(
    model: &Model,
    samples: &[MultimodalSample],
    pairs: &[(usize, usize)],
    bins: usize,
    formula: ChannelFormula,
) -> Result<Vec<PairDiversity>> {
    if samples.is_empty() {
        return Err(DmrError::InvalidInput("no samples for diversity".into()));
    }
    let v = model.dims().modalities;
    for &(m, n) in pairs {
        if m == 0 || n == 0 || m > v || n > v {
            return Err(DmrError::InvalidInput(format!(
                "modality pair ({m}, {n}) outside 1..={v}"
            )));
        }
    }
    let maps = parallel::ordered_map(samples, |s| modality_feature_maps(model, s));
    let maps: Result<Vec<Vec<FeatureMap>>> = maps.into_iter().collect();
    let maps = maps?;

    pairs
        .iter()
        .map(|&(m, n)| {
            let mode = if m == n {
                DistanceMode::Intra
            } else {
                DistanceMode::Inter
            };
            let matrices: Result<Vec<ChannelDistanceMatrix>> = maps
                .iter()
                .map(|fs| channel_distance(&fs[m - 1], &fs[n - 1], mode, formula))
                .collect();
            Ok(PairDiversity {
                pair: (m, n),
                histogram: diversity_histogram(&matrices?, bins)?,
            })
        })
        .collect()
}
