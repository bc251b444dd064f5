//! Variance-ranked hard-combination mining.
//!
//! During an epoch every training sample adds its embedding's `sigma^2` sum
//! to its combination's accumulator. At the epoch boundary the per-element
//! mean `d_j` ranks combinations, the top `|H| = V` become the hard set for
//! the next epoch, and the accumulators restart. Before the warm-up epoch
//! count is reached no hard set is active.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::combinations::{enumerate_combinations, CombinationMask};
use crate::datasynth::MultimodalSample;
use crate::error::{DmrError, Result};
use crate::model::{Model, NormSource};
use crate::parallel;

/// Per-combination running sums of `sigma^2` and element counts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CombinationStats {
    per: BTreeMap<u64, (f64, u64)>,
}

impl CombinationStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fold one sample's log-sigma map into its combination's accumulator.
    pub fn update(&mut self, mask: &CombinationMask, log_sigma: &[f64]) {
        let sum: f64 = log_sigma.iter().map(|&l| (2.0 * l).exp()).sum();
        let entry = self.per.entry(mask.index()).or_insert((0.0, 0));
        entry.0 += sum;
        entry.1 += log_sigma.len() as u64;
    }

    /// `d_j`: mean `sigma^2` per element for every observed combination.
    pub fn variances(&self) -> BTreeMap<u64, f64> {
        self.per
            .iter()
            .map(|(&j, &(sum, count))| (j, sum / count as f64))
            .collect()
    }

    /// Raw `(sum, count)` accumulators, used by checkpoints.
    pub fn raw(&self) -> &BTreeMap<u64, (f64, u64)> {
        &self.per
    }

    pub fn from_raw(per: BTreeMap<u64, (f64, u64)>) -> Self {
        CombinationStats { per }
    }

    pub fn observed_combinations(&self) -> usize {
        self.per.len()
    }

    pub fn total_count(&self) -> u64 {
        self.per.values().map(|&(_, c)| c).sum()
    }

    /// Mean `sigma^2` pooled over every accumulated element.
    pub fn pooled_mean_sigma_sq(&self) -> Option<f64> {
        let (sum, count) = self
            .per
            .values()
            .fold((0.0, 0u64), |(s, c), &(sv, cv)| (s + sv, c + cv));
        if count == 0 {
            None
        } else {
            Some(sum / count as f64)
        }
    }

    pub fn reset(&mut self) {
        self.per.clear();
    }
}

/// The combinations currently receiving the extra hard loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardSet {
    pub indices: BTreeSet<u64>,
    /// Epoch whose statistics selected this set.
    pub epoch_of_selection: usize,
}

impl HardSet {
    pub fn contains(&self, mask: &CombinationMask) -> bool {
        self.indices.contains(&mask.index())
    }
}

/// Top `size` combinations by variance, larger first, ties broken toward the
/// smaller index. Fails when fewer than `size` combinations have statistics.
pub fn select_hard_set(
    variances: &BTreeMap<u64, f64>,
    size: usize,
    epoch: usize,
) -> Result<HardSet> {
    if size == 0 {
        return Err(DmrError::InvalidInput("hard set size must be positive".into()));
    }
    if variances.len() < size {
        return Err(DmrError::InsufficientStats(format!(
            "{} combinations observed, need {size}",
            variances.len()
        )));
    }
    let mut ranked: Vec<(u64, f64)> = variances.iter().map(|(&j, &d)| (j, d)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(HardSet {
        indices: ranked.into_iter().take(size).map(|(j, _)| j).collect(),
        epoch_of_selection: epoch,
    })
}

/// Epoch-boundary refresh, called with the number of completed epochs,
/// which is also the index of the epoch about to start. Accumulators
/// restart every epoch so `d_j` always describes a single epoch. Before
/// `warmup` no set is active; afterwards a failed selection keeps the
/// previous set.
pub fn refresh_schedule(
    epoch: usize,
    warmup: usize,
    stats: &mut CombinationStats,
    previous: Option<&HardSet>,
    size: usize,
) -> Option<HardSet> {
    let next = if epoch < warmup {
        None
    } else {
        match select_hard_set(&stats.variances(), size, epoch) {
            Ok(h) => Some(h),
            Err(_) => previous.cloned(),
        }
    };
    stats.reset();
    next
}

/// Mean `sigma^2` per combination for a trained model over `samples`, using
/// frozen normalization statistics. This is the offline counterpart of the
/// accumulators the training loop maintains; it fans out per combination.
pub fn offline_variances(
    model: &Model,
    samples: &[MultimodalSample],
) -> Result<BTreeMap<u64, f64>> {
    if samples.is_empty() {
        return Err(DmrError::InvalidInput(
            "offline mining needs at least one sample".into(),
        ));
    }
    let masks = enumerate_combinations(model.dims().modalities)?;
    let rows = parallel::ordered_map(&masks, |mask| -> Result<(u64, f64)> {
        let mut stats = CombinationStats::new();
        for s in samples {
            let emb = model.embed(s, mask, NormSource::Frozen)?;
            stats.update(mask, emb.log_sigma.as_slice());
        }
        Ok((mask.index(), stats.variances()[&mask.index()]))
    });
    rows.into_iter().collect()
}
