//! Modality-combination masks and dropout policies.
//!
//! A combination of V modalities is a non-empty bit vector `delta`, indexed by
//! `j = sum_k 2^(k-1) * delta_k` so modality 1 is the least significant bit.
//! Index 0 (all modalities dropped) is never valid.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DmrError, Result};
use crate::tensor::FeatureMap;

/// Non-empty subset of modalities, e.g. `101` = modalities 1 and 3 of 3.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CombinationMask {
    bits: Vec<bool>,
}

impl CombinationMask {
    /// Build from per-modality presence flags. At least one must be set.
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(DmrError::InvalidInput("mask needs at least one modality".into()));
        }
        if !bits.iter().any(|&b| b) {
            return Err(DmrError::InvalidInput(
                "all-zero mask: at least one modality must stay active".into(),
            ));
        }
        Ok(CombinationMask { bits })
    }

    /// Inverse of [`CombinationMask::index`]. Requires `1 <= index <= 2^v - 1`.
    pub fn from_index(index: u64, v: usize) -> Result<Self> {
        if v == 0 || v > 63 {
            return Err(DmrError::InvalidInput(format!(
                "modality count {v} outside supported range 1..=63"
            )));
        }
        let max = (1u64 << v) - 1;
        if index == 0 || index > max {
            return Err(DmrError::InvalidInput(format!(
                "combination index {index} outside 1..={max} for {v} modalities"
            )));
        }
        let bits = (0..v).map(|k| index >> k & 1 == 1).collect();
        Ok(CombinationMask { bits })
    }

    /// Parse a bit-string like `"101"` (modality 1 first).
    pub fn from_bit_string(s: &str) -> Result<Self> {
        let bits: Result<Vec<bool>> = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(DmrError::InvalidInput(format!(
                    "mask bit-string may only contain 0/1, found {other:?}"
                ))),
            })
            .collect();
        CombinationMask::new(bits?)
    }

    /// `j = sum_k 2^(k-1) * delta_k`; always in `1..=2^v - 1`.
    pub fn index(&self) -> u64 {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(k, _)| 1u64 << k)
            .sum()
    }

    pub fn modality_count(&self) -> usize {
        self.bits.len()
    }

    pub fn is_active(&self, modality: usize) -> bool {
        self.bits[modality]
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// `"101"` form, modality 1 first. Matches [`CombinationMask::from_bit_string`].
    pub fn bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

impl fmt::Display for CombinationMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.bit_string())
    }
}

impl FromStr for CombinationMask {
    type Err = DmrError;

    fn from_str(s: &str) -> Result<Self> {
        CombinationMask::from_bit_string(s)
    }
}

/// All `2^v - 1` non-empty combinations, ascending by index.
pub fn enumerate_combinations(v: usize) -> Result<Vec<CombinationMask>> {
    if v == 0 || v > 16 {
        return Err(DmrError::InvalidInput(format!(
            "enumeration supports 1..=16 modalities, got {v}"
        )));
    }
    (1..(1u64 << v))
        .map(|j| CombinationMask::from_index(j, v))
        .collect()
}

/// How the training loop draws a combination for each sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DropoutPolicy {
    /// Uniform over all non-empty combinations.
    UniformNonempty,
    /// Keep each modality independently with probability `p`; the all-zero
    /// outcome is rejected and redrawn, so `p` must be positive.
    Bernoulli { p: f64 },
    /// Always the same combination.
    Fixed { mask: String },
}

impl DropoutPolicy {
    /// Validate against a modality count. Returns the parsed fixed mask when
    /// there is one so callers do not re-parse per sample.
    pub fn validate(&self, v: usize) -> Result<Option<CombinationMask>> {
        match self {
            DropoutPolicy::UniformNonempty => Ok(None),
            DropoutPolicy::Bernoulli { p } => {
                if !(*p > 0.0 && *p <= 1.0) {
                    return Err(DmrError::InvalidConfig(format!(
                        "bernoulli keep-probability must be in (0, 1], got {p}"
                    )));
                }
                Ok(None)
            }
            DropoutPolicy::Fixed { mask } => {
                let parsed = CombinationMask::from_bit_string(mask)?;
                if parsed.modality_count() != v {
                    return Err(DmrError::InvalidConfig(format!(
                        "fixed mask {mask} has {} bits but the run has {v} modalities",
                        parsed.modality_count()
                    )));
                }
                Ok(Some(parsed))
            }
        }
    }
}

/// Draw one combination under `policy`. The uniform policy is equiprobable
/// over all `2^v - 1` non-empty masks; bernoulli resamples the all-zero draw.
pub fn sample_mask<R: Rng + ?Sized>(
    policy: &DropoutPolicy,
    v: usize,
    rng: &mut R,
) -> Result<CombinationMask> {
    if v == 0 || v > 63 {
        return Err(DmrError::InvalidInput(format!(
            "modality count {v} outside supported range 1..=63"
        )));
    }
    match policy {
        DropoutPolicy::UniformNonempty => {
            let j = rng.gen_range(1..=(1u64 << v) - 1);
            CombinationMask::from_index(j, v)
        }
        DropoutPolicy::Bernoulli { p } => {
            if !(*p > 0.0 && *p <= 1.0) {
                return Err(DmrError::InvalidConfig(format!(
                    "bernoulli keep-probability must be in (0, 1], got {p}"
                )));
            }
            loop {
                let bits: Vec<bool> = (0..v).map(|_| rng.gen::<f64>() < *p).collect();
                if bits.iter().any(|&b| b) {
                    return CombinationMask::new(bits);
                }
            }
        }
        DropoutPolicy::Fixed { mask } => {
            let parsed = CombinationMask::from_bit_string(mask)?;
            if parsed.modality_count() != v {
                return Err(DmrError::InvalidConfig(format!(
                    "fixed mask {mask} has {} bits but the run has {v} modalities",
                    parsed.modality_count()
                )));
            }
            Ok(parsed)
        }
    }
}

/// Zero out the feature maps of dropped modalities. Kept maps are copied
/// through unchanged, so applying the same mask twice is a no-op.
pub fn apply_mask(features: &[FeatureMap], mask: &CombinationMask) -> Result<Vec<FeatureMap>> {
    if features.len() != mask.modality_count() {
        return Err(DmrError::InvalidInput(format!(
            "{} feature maps but mask covers {} modalities",
            features.len(),
            mask.modality_count()
        )));
    }
    Ok(features
        .iter()
        .enumerate()
        .map(|(v, f)| {
            if mask.is_active(v) {
                f.clone()
            } else {
                FeatureMap::zeros(f.channels(), f.positions())
            }
        })
        .collect())
}
