//! Grid sweeps over the regularizer weights. Every grid point is an
//! independent run with its own seed, so points fan out in parallel and a
//! single failed point is reported instead of sinking the whole sweep.

use serde::Serialize;

use crate::config::{ExperimentConfig, TrainingMode};
use crate::error::{DmrError, Result};
use crate::parallel;
use crate::train::run_experiment;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum SweepOutcome {
    Finished {
        /// Pooled mean `sigma^2` of the final epoch.
        mean_sigma_sq: f64,
        /// Metric averaged over all modality combinations.
        average_metric: f64,
        /// Metric with every modality present.
        full_metric: f64,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub outcome: SweepOutcome,
}

/// Per grid point aggregate over its finished seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub alpha: f64,
    pub beta: f64,
    pub finished: usize,
    pub failed: usize,
    pub mean_sigma_sq: f64,
    pub average_metric: f64,
}

fn run_point(base: &ExperimentConfig, alpha: f64, beta: f64, seed: u64) -> SweepRow {
    let mut cfg = base.clone();
    cfg.alpha = alpha;
    cfg.beta = beta;
    cfg.seed = seed;
    // Each seed is a full replicate: fresh data draw and fresh init.
    cfg.dataset.seed = seed;
    let outcome = match cfg.validate().and_then(|_| run_experiment(&cfg)) {
        Ok((_, result)) => {
            let full_index = (1u64 << cfg.dataset.modalities) - 1;
            SweepOutcome::Finished {
                mean_sigma_sq: result.final_mean_sigma_sq.unwrap_or(f64::NAN),
                average_metric: result.eval.average,
                full_metric: result
                    .eval
                    .row(full_index)
                    .map(|r| r.value)
                    .unwrap_or(f64::NAN),
            }
        }
        Err(e) => SweepOutcome::Failed {
            error: e.to_string(),
        },
    };
    SweepRow {
        alpha,
        beta,
        seed,
        outcome,
    }
}

/// Run the full `alphas x betas x seeds` grid. Row order is the iteration
/// order of the three lists, regardless of how the work is scheduled.
pub fn run_sweep(
    base: &ExperimentConfig,
    alphas: &[f64],
    betas: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() || betas.is_empty() || seeds.is_empty() {
        return Err(DmrError::InvalidConfig(
            "sweep grid needs at least one alpha, one beta, and one seed".into(),
        ));
    }
    if base.mode == TrainingMode::Vanilla {
        return Err(DmrError::InvalidConfig(
            "sweeping regularizer weights in vanilla mode changes nothing".into(),
        ));
    }
    base.validate()?;

    let mut points = Vec::with_capacity(alphas.len() * betas.len() * seeds.len());
    for &alpha in alphas {
        for &beta in betas {
            for &seed in seeds {
                points.push((alpha, beta, seed));
            }
        }
    }
    Ok(parallel::ordered_map(&points, |&(a, b, s)| {
        run_point(base, a, b, s)
    }))
}

/// Aggregate rows by grid point, in first-appearance order. Failed seeds
/// are counted but excluded from the means.
pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut order: Vec<(u64, u64)> = Vec::new();
    let mut acc: std::collections::HashMap<(u64, u64), (usize, usize, f64, f64)> =
        std::collections::HashMap::new();
    for row in rows {
        let key = (row.alpha.to_bits(), row.beta.to_bits());
        if !acc.contains_key(&key) {
            order.push(key);
        }
        let entry = acc.entry(key).or_insert((0, 0, 0.0, 0.0));
        match &row.outcome {
            SweepOutcome::Finished {
                mean_sigma_sq,
                average_metric,
                ..
            } => {
                entry.0 += 1;
                entry.2 += mean_sigma_sq;
                entry.3 += average_metric;
            }
            SweepOutcome::Failed { .. } => entry.1 += 1,
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (finished, failed, sig_sum, met_sum) = acc[&key];
            let n = finished.max(1) as f64;
            SweepSummary {
                alpha: f64::from_bits(key.0),
                beta: f64::from_bits(key.1),
                finished,
                failed,
                mean_sigma_sq: sig_sum / n,
                average_metric: met_sum / n,
            }
        })
        .collect()
}
