//! The training loop: SGD with momentum and weight decay over the flat
//! parameter vector, minibatch normalization statistics adopted after every
//! step, per-epoch variance mining, and a state snapshot precise enough to
//! resume a run bit for bit.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::combinations::{sample_mask, CombinationMask};
use crate::config::{ExperimentConfig, TrainingMode};
use crate::datasynth::{self, MultimodalSample};
use crate::error::{DmrError, Result};
use crate::losses::{batch_losses, LossBreakdown};
use crate::metrics::{per_combination_eval, CombinationResultTable};
use crate::mining::{refresh_schedule, CombinationStats, HardSet};
use crate::model::{
    backward_batch, forward_batch, standard_normal_map, BnBuffers, Model, NormSource,
};
use crate::rng::{derive_seed, Stream};

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub batch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// One combination's variance statistic at an epoch boundary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MineRow {
    pub index: u64,
    pub bit_string: String,
    pub d: f64,
    pub elements: u64,
    pub in_hard_set: bool,
}

/// Epoch-boundary mining snapshot: the variances gathered over the finished
/// epoch and the hard set selected from them (when past warmup).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MineRecord {
    pub epoch: usize,
    /// Mean `sigma^2` pooled over every element seen this epoch.
    pub mean_sigma_sq: Option<f64>,
    pub rows: Vec<MineRow>,
    pub hard: Option<HardSet>,
}

/// Everything a checkpoint must capture to resume a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub epochs_done: usize,
    pub global_step: u64,
    pub params: Vec<f64>,
    pub bn: BnBuffers,
    pub velocity: Vec<f64>,
    pub stats_raw: BTreeMap<u64, (f64, u64)>,
    pub hard: Option<HardSet>,
    pub shuffle_state: ([u8; 32], u128),
    pub mask_state: ([u8; 32], u128),
    pub eps_state: ([u8; 32], u128),
}

#[derive(Debug)]
pub struct Trainer {
    config: ExperimentConfig,
    model: Model,
    velocity: Vec<f64>,
    stats: CombinationStats,
    hard: Option<HardSet>,
    epochs_done: usize,
    global_step: u64,
    shuffle: Stream,
    mask_stream: Stream,
    eps_stream: Stream,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutput {
    pub steps: Vec<StepRecord>,
    pub mine: MineRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub steps: Vec<StepRecord>,
    pub mines: Vec<MineRecord>,
}

impl RunOutput {
    /// Pooled mean `sigma^2` of the last trained epoch.
    pub fn final_mean_sigma_sq(&self) -> Option<f64> {
        self.mines.last().and_then(|m| m.mean_sigma_sq)
    }
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Stream::derive(config.seed, "init");
        let model = Model::new(config.model_dims(), &mut init)?;
        let velocity = vec![0.0; model.param_count()];
        Ok(Trainer {
            shuffle: Stream::derive(config.seed, "shuffle"),
            mask_stream: Stream::derive(config.seed, "mask"),
            eps_stream: Stream::derive(config.seed, "eps"),
            config,
            model,
            velocity,
            stats: CombinationStats::new(),
            hard: None,
            epochs_done: 0,
            global_step: 0,
        })
    }

    /// Rebuild a trainer mid-run. The stream seeds must be the ones this
    /// config derives, otherwise the state belongs to a different run.
    pub fn from_state(config: ExperimentConfig, state: TrainerState) -> Result<Self> {
        config.validate()?;
        let mut init = Stream::derive(config.seed, "init");
        let mut model = Model::new(config.model_dims(), &mut init)?;
        if state.params.len() != model.param_count() {
            return Err(DmrError::Incompatible(format!(
                "state carries {} parameters, architecture needs {}",
                state.params.len(),
                model.param_count()
            )));
        }
        if state.velocity.len() != model.param_count() {
            return Err(DmrError::Incompatible(
                "velocity length does not match the architecture".into(),
            ));
        }
        for (label, got) in [
            ("shuffle", state.shuffle_state.0),
            ("mask", state.mask_state.0),
            ("eps", state.eps_state.0),
        ] {
            if got != derive_seed(config.seed, label) {
                return Err(DmrError::Incompatible(format!(
                    "{label} stream seed does not derive from run seed {}",
                    config.seed
                )));
            }
        }
        model.params = state.params;
        model.bn = state.bn;
        Ok(Trainer {
            shuffle: Stream::from_state(state.shuffle_state.0, state.shuffle_state.1),
            mask_stream: Stream::from_state(state.mask_state.0, state.mask_state.1),
            eps_stream: Stream::from_state(state.eps_state.0, state.eps_state.1),
            config,
            model,
            velocity: state.velocity,
            stats: CombinationStats::from_raw(state.stats_raw),
            hard: state.hard,
            epochs_done: state.epochs_done,
            global_step: state.global_step,
        })
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            epochs_done: self.epochs_done,
            global_step: self.global_step,
            params: self.model.params.clone(),
            bn: self.model.bn.clone(),
            velocity: self.velocity.clone(),
            stats_raw: self.stats.raw().clone(),
            hard: self.hard.clone(),
            shuffle_state: self.shuffle.state(),
            mask_state: self.mask_stream.state(),
            eps_state: self.eps_stream.state(),
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn hard_set(&self) -> Option<&HardSet> {
        self.hard.as_ref()
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    fn apply_update(&mut self, grads: &[f64], lr: f64) {
        // Decay applies to every parameter uniformly, normalization scales
        // and biases included; the velocity integrates the decayed gradient.
        let wd = self.config.optimizer.weight_decay;
        let mom = self.config.optimizer.momentum;
        for i in 0..self.model.params.len() {
            let g = grads[i] + wd * self.model.params[i];
            self.velocity[i] = mom * self.velocity[i] + g;
            self.model.params[i] -= lr * self.velocity[i];
        }
    }

    /// Train one epoch over `train`, then refresh the hard set at the
    /// boundary. The mining record reports the finished epoch's variances
    /// together with the set selected from them.
    pub fn run_epoch(&mut self, train: &[MultimodalSample]) -> Result<EpochOutput> {
        if train.is_empty() {
            return Err(DmrError::InvalidInput("empty training split".into()));
        }
        if self.epochs_done >= self.config.epochs {
            return Err(DmrError::InvalidInput(format!(
                "run already finished its {} epochs",
                self.config.epochs
            )));
        }
        let dims = self.config.model_dims();
        let epoch = self.epochs_done;
        let lr = self.config.optimizer.rate_at_epoch(epoch);
        let alpha = self.config.effective_alpha();
        let beta = self.config.effective_beta();

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle);

        let mut steps = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let samples: Vec<&MultimodalSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut masks = Vec::with_capacity(chunk.len());
            for _ in chunk {
                masks.push(sample_mask(
                    &self.config.dropout,
                    dims.modalities,
                    &mut self.mask_stream,
                )?);
            }
            // The vanilla mode and forced-zero noise never touch the eps
            // stream, so those runs stay comparable draw for draw.
            let eps: Option<Vec<_>> = if self.config.draws_noise() {
                Some(
                    (0..chunk.len())
                        .map(|_| {
                            standard_normal_map(dims.channels, dims.spatial, &mut self.eps_stream)
                        })
                        .collect(),
                )
            } else {
                None
            };

            let cache = forward_batch(
                &self.model,
                &samples,
                &masks,
                eps.as_deref(),
                NormSource::Minibatch,
            )?;
            let hard_indices: Option<&BTreeSet<u64>> = if self.config.mode == TrainingMode::DmrHcr
            {
                self.hard.as_ref().map(|h| &h.indices)
            } else {
                None
            };
            let losses = batch_losses(&cache, hard_indices, alpha, beta)?;
            self.global_step += 1;
            if !losses.total.is_finite() {
                return Err(DmrError::Divergence {
                    step: self.global_step,
                    detail: format!(
                        "total loss became non-finite (l_ttl {}, l_dr {}, l_hcr {})",
                        losses.l_ttl, losses.l_dr, losses.l_hcr
                    ),
                });
            }

            let grads = backward_batch(&self.model, &cache, alpha, beta, hard_indices);
            self.apply_update(&grads, lr);
            self.model.bn = cache.new_running.clone();

            for (mask, ls) in masks.iter().zip(&cache.log_sigma) {
                self.stats.update(mask, ls.as_slice());
            }

            steps.push(StepRecord {
                step: self.global_step,
                epoch,
                lr,
                batch: chunk.len(),
                losses,
            });
        }

        // Snapshot before the refresh resets the accumulators.
        let raw = self.stats.raw().clone();
        let mean_sigma_sq = self.stats.pooled_mean_sigma_sq();
        self.epochs_done += 1;
        self.hard = refresh_schedule(
            self.epochs_done,
            self.config.warmup_epochs,
            &mut self.stats,
            self.hard.as_ref(),
            self.config.effective_hard_set_size(),
        );

        let rows = raw
            .iter()
            .map(|(&index, &(sum, count))| {
                let mask = CombinationMask::from_index(index, dims.modalities)
                    .expect("observed index is a valid combination");
                MineRow {
                    index,
                    bit_string: mask.bit_string(),
                    d: sum / count as f64,
                    elements: count,
                    in_hard_set: self
                        .hard
                        .as_ref()
                        .map_or(false, |h| h.indices.contains(&index)),
                }
            })
            .collect();

        Ok(EpochOutput {
            steps,
            mine: MineRecord {
                epoch,
                mean_sigma_sq,
                rows,
                hard: self.hard.clone(),
            },
        })
    }

    pub fn run_to_end(&mut self, train: &[MultimodalSample]) -> Result<RunOutput> {
        let mut steps = Vec::new();
        let mut mines = Vec::new();
        while self.epochs_done < self.config.epochs {
            let out = self.run_epoch(train)?;
            steps.extend(out.steps);
            mines.push(out.mine);
        }
        Ok(RunOutput { steps, mines })
    }
}

/// A finished run: its loss history, mining history, and the evaluation of
/// the final model over every modality combination of the test split.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub steps: Vec<StepRecord>,
    pub mines: Vec<MineRecord>,
    pub eval: CombinationResultTable,
    pub final_mean_sigma_sq: Option<f64>,
    pub hard: Option<HardSet>,
}

/// Drive a trainer (fresh or resumed) to its configured epoch count and
/// evaluate the final model. Records cover only the epochs run here, so a
/// resumed run yields the tail of the histories.
pub fn finish_run(trainer: &mut Trainer, data: &datasynth::Dataset) -> Result<ExperimentResult> {
    let out = trainer.run_to_end(&data.train)?;
    let eval = per_combination_eval(trainer.model(), &data.test, trainer.config().eval_metric)?;
    Ok(ExperimentResult {
        final_mean_sigma_sq: out.final_mean_sigma_sq(),
        hard: trainer.hard_set().cloned(),
        steps: out.steps,
        mines: out.mines,
        eval,
    })
}

/// Generate the dataset, train to the configured epoch count, evaluate.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(Trainer, ExperimentResult)> {
    let data = datasynth::generate(&config.dataset)?;
    let mut trainer = Trainer::new(config.clone())?;
    let result = finish_run(&mut trainer, &data)?;
    Ok((trainer, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::SyntheticSpec;

    fn tiny_config(mode: TrainingMode, seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::standard_synthetic(mode, seed);
        cfg.epochs = 3;
        cfg.batch_size = 4;
        cfg.warmup_epochs = 1;
        cfg.architecture.hidden = 6;
        cfg.architecture.channels = 3;
        cfg.architecture.spatial = 2;
        cfg.dataset = SyntheticSpec {
            modalities: 2,
            classes: 2,
            input_dims: vec![4, 4],
            snr: vec![1.0, 1.0],
            shared_dim: 2,
            specific_dim: 1,
            train_size: 12,
            test_size: 8,
            seed,
        };
        cfg
    }

    fn loss_stream(result: &ExperimentResult) -> Vec<f64> {
        result.steps.iter().map(|s| s.losses.total).collect()
    }

    #[test]
    fn same_seed_reproduces_the_run_exactly() {
        let cfg = tiny_config(TrainingMode::DmrHcr, 11);
        let (ta, ra) = run_experiment(&cfg).unwrap();
        let (tb, rb) = run_experiment(&cfg).unwrap();
        assert_eq!(loss_stream(&ra), loss_stream(&rb));
        assert_eq!(ta.model().params, tb.model().params);
        assert_eq!(ra.eval.average, rb.eval.average);
    }

    #[test]
    fn vanilla_equals_silenced_dmr_bitwise() {
        let vanilla = tiny_config(TrainingMode::Vanilla, 5);
        let mut silenced = tiny_config(TrainingMode::Dmr, 5);
        silenced.alpha = 0.0;
        silenced.beta = 0.0;
        silenced.force_eps_zero = true;
        let (tv, rv) = run_experiment(&vanilla).unwrap();
        let (ts, rs) = run_experiment(&silenced).unwrap();
        let lv = loss_stream(&rv);
        let ls = loss_stream(&rs);
        assert_eq!(lv.len(), ls.len());
        for (i, (a, b)) in lv.iter().zip(&ls).enumerate() {
            assert_eq!(
                a.to_bits(),
                b.to_bits(),
                "loss streams diverge at step {i}: {a} vs {b}"
            );
        }
        assert_eq!(tv.model().params, ts.model().params);
    }

    #[test]
    fn training_reduces_the_loss() {
        let mut cfg = tiny_config(TrainingMode::Dmr, 3);
        cfg.epochs = 12;
        cfg.dataset.train_size = 32;
        let (_, result) = run_experiment(&cfg).unwrap();
        let per_epoch: Vec<f64> = (0..cfg.epochs)
            .map(|e| {
                let epoch: Vec<f64> = result
                    .steps
                    .iter()
                    .filter(|s| s.epoch == e)
                    .map(|s| s.losses.total)
                    .collect();
                epoch.iter().sum::<f64>() / epoch.len() as f64
            })
            .collect();
        assert!(
            per_epoch[cfg.epochs - 1] < per_epoch[0] * 0.9,
            "mean loss failed to drop: first {} last {}",
            per_epoch[0],
            per_epoch[cfg.epochs - 1]
        );
    }

    #[test]
    fn hard_set_appears_at_the_warmup_boundary() {
        let mut cfg = tiny_config(TrainingMode::DmrHcr, 7);
        cfg.epochs = 4;
        cfg.warmup_epochs = 2;
        let (trainer, result) = run_experiment(&cfg).unwrap();
        assert!(result.mines[0].hard.is_none(), "no set during warmup");
        assert!(result.mines[1].hard.is_some(), "selection fires entering epoch 2");
        let first = result.mines[1].hard.as_ref().unwrap();
        assert_eq!(first.epoch_of_selection, 2);
        assert_eq!(first.indices.len(), cfg.effective_hard_set_size());
        assert!(trainer.hard_set().is_some());
        // Rows of the selection epoch flag exactly the selected set.
        let flagged: Vec<u64> = result.mines[1]
            .rows
            .iter()
            .filter(|r| r.in_hard_set)
            .map(|r| r.index)
            .collect();
        let expect: Vec<u64> = first.indices.iter().copied().collect();
        assert_eq!(flagged, expect);
    }

    #[test]
    fn state_snapshot_resumes_bit_for_bit() {
        let cfg = tiny_config(TrainingMode::DmrHcr, 19);
        let data = datasynth::generate(&cfg.dataset).unwrap();

        let mut whole = Trainer::new(cfg.clone()).unwrap();
        let full = whole.run_to_end(&data.train).unwrap();

        let mut first = Trainer::new(cfg.clone()).unwrap();
        first.run_epoch(&data.train).unwrap();
        let snapshot = first.state();
        let mut resumed = Trainer::from_state(cfg.clone(), snapshot).unwrap();
        let rest = resumed.run_to_end(&data.train).unwrap();

        let tail: Vec<f64> = full
            .steps
            .iter()
            .filter(|s| s.epoch >= 1)
            .map(|s| s.losses.total)
            .collect();
        let resumed_losses: Vec<f64> = rest.steps.iter().map(|s| s.losses.total).collect();
        assert_eq!(tail.len(), resumed_losses.len());
        for (a, b) in tail.iter().zip(&resumed_losses) {
            assert_eq!(a.to_bits(), b.to_bits(), "resumed run drifted");
        }
        assert_eq!(whole.model().params, resumed.model().params);
        assert_eq!(whole.state(), resumed.state());
    }

    #[test]
    fn foreign_state_is_rejected() {
        let cfg = tiny_config(TrainingMode::Dmr, 1);
        let mut other = tiny_config(TrainingMode::Dmr, 2);
        other.seed = 2;
        let trainer = Trainer::new(other).unwrap();
        let state = trainer.state();
        assert!(matches!(
            Trainer::from_state(cfg, state),
            Err(DmrError::Incompatible(_))
        ));
    }

    #[test]
    fn runaway_learning_rate_reports_divergence() {
        let mut cfg = tiny_config(TrainingMode::Dmr, 0);
        cfg.optimizer.learning_rate = 1e300;
        cfg.optimizer.lr_milestones = vec![];
        let err = run_experiment(&cfg).unwrap_err();
        assert!(
            matches!(err, DmrError::Divergence { .. }),
            "expected divergence, got {err:?}"
        );
    }

    #[test]
    fn partial_final_batch_is_trained() {
        let mut cfg = tiny_config(TrainingMode::Vanilla, 4);
        cfg.epochs = 1;
        cfg.batch_size = 5;
        cfg.dataset.train_size = 12;
        let (_, result) = run_experiment(&cfg).unwrap();
        let sizes: Vec<usize> = result.steps.iter().map(|s| s.batch).collect();
        assert_eq!(sizes, vec![5, 5, 2]);
    }

    #[test]
    fn milestones_step_the_recorded_rate() {
        let mut cfg = tiny_config(TrainingMode::Vanilla, 8);
        cfg.epochs = 4;
        cfg.optimizer.lr_milestones = vec![2];
        cfg.optimizer.lr_gamma = 0.5;
        let (_, result) = run_experiment(&cfg).unwrap();
        for s in &result.steps {
            let expect = if s.epoch >= 2 {
                cfg.optimizer.learning_rate * 0.5
            } else {
                cfg.optimizer.learning_rate
            };
            assert_eq!(s.lr, expect);
        }
    }
}
