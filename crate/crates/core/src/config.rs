//! Experiment configuration: one TOML-serializable struct that pins every
//! knob a run depends on, plus a canonical hash so artifacts can state which
//! configuration produced them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::combinations::DropoutPolicy;
use crate::datasynth::SyntheticSpec;
use crate::error::{DmrError, Result};
use crate::metrics::MetricKind;
use crate::model::ModelDims;

/// Which loss terms are live. All modes share one code path; `Vanilla` pins
/// the sampled representation to the mean and zeroes both regularizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainingMode {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "dmr")]
    Dmr,
    #[serde(rename = "dmr+hcr")]
    DmrHcr,
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingMode::Vanilla => "vanilla",
            TrainingMode::Dmr => "dmr",
            TrainingMode::DmrHcr => "dmr+hcr",
        })
    }
}

impl FromStr for TrainingMode {
    type Err = DmrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(TrainingMode::Vanilla),
            "dmr" => Ok(TrainingMode::Dmr),
            "dmr+hcr" => Ok(TrainingMode::DmrHcr),
            other => Err(DmrError::InvalidConfig(format!(
                "unknown mode {other:?}, expected vanilla, dmr, or dmr+hcr"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub hidden: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            hidden: 32,
            channels: 8,
            spatial: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_milestones: vec![40],
            lr_gamma: 0.1,
        }
    }
}

impl OptimizerConfig {
    /// Constant rate, stepped down at each milestone already passed.
    pub fn rate_at_epoch(&self, epoch: usize) -> f64 {
        let steps = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.learning_rate * self.lr_gamma.powi(steps as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub mode: TrainingMode,
    /// Master seed; every random stream of the run derives from it.
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the distribution regularizer.
    pub alpha: f64,
    /// Weight of the hard-combination term.
    pub beta: f64,
    /// Epochs trained before the first hard-set selection.
    pub warmup_epochs: usize,
    /// Hard combinations tracked; defaults to the modality count.
    pub hard_set_size: Option<usize>,
    /// Pin the sampled path to the mean without changing loss weights.
    pub force_eps_zero: bool,
    pub eval_metric: MetricKind,
    pub architecture: Architecture,
    pub optimizer: OptimizerConfig,
    pub dropout: DropoutPolicy,
    pub dataset: SyntheticSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::standard_synthetic(TrainingMode::Dmr, 0)
    }
}

impl ExperimentConfig {
    /// The benchmark configuration: three modalities where the middle one's
    /// signal sits well below the others, dragging down every combination
    /// that has to lean on it.
    pub fn standard_synthetic(mode: TrainingMode, seed: u64) -> Self {
        ExperimentConfig {
            mode,
            seed,
            epochs: 40,
            batch_size: 32,
            alpha: 1e-3,
            beta: 0.7,
            warmup_epochs: 5,
            hard_set_size: None,
            force_eps_zero: false,
            eval_metric: MetricKind::Accuracy,
            architecture: Architecture {
                spatial: 16,
                ..Architecture::default()
            },
            optimizer: OptimizerConfig {
                lr_milestones: vec![12],
                ..OptimizerConfig::default()
            },
            dropout: DropoutPolicy::UniformNonempty,
            dataset: SyntheticSpec {
                modalities: 3,
                classes: 4,
                input_dims: vec![16, 16, 16],
                snr: vec![0.5, 0.15, 0.45],
                shared_dim: 6,
                specific_dim: 2,
                train_size: 360,
                test_size: 3000,
                seed,
            },
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            modalities: self.dataset.modalities,
            input_dims: self.dataset.input_dims.clone(),
            hidden: self.architecture.hidden,
            channels: self.architecture.channels,
            spatial: self.architecture.spatial,
            classes: self.dataset.classes,
        }
    }

    /// Regularizer weight actually applied: zero outside dmr modes.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            TrainingMode::Vanilla => 0.0,
            TrainingMode::Dmr | TrainingMode::DmrHcr => self.alpha,
        }
    }

    /// Hard-combination weight actually applied: zero outside dmr+hcr.
    pub fn effective_beta(&self) -> f64 {
        match self.mode {
            TrainingMode::Vanilla | TrainingMode::Dmr => 0.0,
            TrainingMode::DmrHcr => self.beta,
        }
    }

    /// Whether the training path draws noise at all.
    pub fn draws_noise(&self) -> bool {
        self.mode != TrainingMode::Vanilla && !self.force_eps_zero
    }

    pub fn effective_hard_set_size(&self) -> usize {
        self.hard_set_size.unwrap_or(self.dataset.modalities)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DmrError::InvalidConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return bad(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return bad(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        let opt = &self.optimizer;
        if !opt.learning_rate.is_finite() || opt.learning_rate <= 0.0 {
            return bad(format!("learning_rate must be positive, got {}", opt.learning_rate));
        }
        if !opt.momentum.is_finite() || !(0.0..1.0).contains(&opt.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", opt.momentum));
        }
        if !opt.weight_decay.is_finite() || opt.weight_decay < 0.0 {
            return bad(format!("weight_decay must be non-negative, got {}", opt.weight_decay));
        }
        if !opt.lr_gamma.is_finite() || opt.lr_gamma <= 0.0 || opt.lr_gamma > 1.0 {
            return bad(format!("lr_gamma must lie in (0, 1], got {}", opt.lr_gamma));
        }
        if opt.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lr_milestones must be strictly increasing".into());
        }
        if self.architecture.hidden == 0
            || self.architecture.channels == 0
            || self.architecture.spatial == 0
        {
            return bad("architecture dimensions must all be positive".into());
        }
        self.dataset
            .validate()
            .map_err(|e| DmrError::InvalidConfig(format!("dataset: {e}")))?;
        self.dropout
            .validate(self.dataset.modalities)
            .map_err(|e| DmrError::InvalidConfig(format!("dropout: {e}")))?;
        let combos = (1u64 << self.dataset.modalities) - 1;
        let size = self.effective_hard_set_size() as u64;
        if size == 0 || size > combos {
            return bad(format!(
                "hard_set_size must lie in 1..={combos}, got {size}"
            ));
        }
        self.model_dims()
            .validate()
            .map_err(|e| DmrError::InvalidConfig(format!("model: {e}")))?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| DmrError::InvalidConfig(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| DmrError::InvalidConfig(format!("config serialize: {e}")))
    }

    /// Hash of the canonical JSON form; artifacts carry it so mismatched
    /// config and output files are detectable.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes to JSON");
        let digest = Sha256::digest(json.as_bytes());
        let mut hex = String::with_capacity(64);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}
