//! Seeded synthetic multimodal classification data.
//!
//! Each class owns a fixed shared latent code plus one modality-specific code
//! per modality. Modality `v` observes a random linear projection of those
//! codes scaled by `snr[v]`, plus unit Gaussian noise, so a combination's
//! usable signal grows with the summed squared snr of its active modalities.
//! Every sample is generated from its own derived stream, which makes the
//! whole dataset a pure function of the spec and safe to build in parallel.

use serde::{Deserialize, Serialize};

use crate::combinations::CombinationMask;
use crate::error::{DmrError, Result};
use crate::parallel;
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub modalities: usize,
    pub classes: usize,
    /// Observed width per modality.
    pub input_dims: Vec<usize>,
    /// Per-modality signal multiplier.
    pub snr: Vec<f64>,
    pub shared_dim: usize,
    pub specific_dim: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modalities == 0 || self.modalities > 63 {
            return Err(DmrError::InvalidConfig(format!(
                "modalities must be in 1..=63, got {}",
                self.modalities
            )));
        }
        if self.classes < 2 {
            return Err(DmrError::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.input_dims.len() != self.modalities || self.snr.len() != self.modalities {
            return Err(DmrError::InvalidConfig(format!(
                "input_dims ({}) and snr ({}) must both cover {} modalities",
                self.input_dims.len(),
                self.snr.len(),
                self.modalities
            )));
        }
        if self.input_dims.iter().any(|&d| d == 0) {
            return Err(DmrError::InvalidConfig("zero-width modality".into()));
        }
        if self.snr.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(DmrError::InvalidConfig(
                "snr entries must be positive and finite".into(),
            ));
        }
        if self.shared_dim == 0 {
            return Err(DmrError::InvalidConfig("shared_dim must be positive".into()));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(DmrError::InvalidConfig("empty split requested".into()));
        }
        Ok(())
    }

    /// Summed squared signal-to-noise ratio over a combination's active
    /// modalities. Per-combination accuracy of a well-trained model should
    /// rank consistently with this.
    pub fn signal_energy(&self, mask: &CombinationMask) -> f64 {
        self.snr
            .iter()
            .enumerate()
            .filter(|&(v, _)| mask.is_active(v))
            .map(|(_, &s)| s * s)
            .sum()
    }
}

/// One observation: a vector per modality and a 1-based class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub modalities: Vec<Vec<f64>>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub train: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
}

/// Fixed per-class codes and per-modality projections, all drawn from the
/// spec seed before any sample exists.
struct ClassBank {
    /// `[class][shared_dim]`
    shared: Vec<Vec<f64>>,
    /// `[class][modality][specific_dim]`
    specific: Vec<Vec<Vec<f64>>>,
    /// `[modality][input_dim * shared_dim]`, row-major, entries scaled by
    /// `1/sqrt(shared_dim)`.
    proj_shared: Vec<Vec<f64>>,
    /// `[modality][input_dim * specific_dim]`, scaled by `1/sqrt(specific_dim)`.
    proj_specific: Vec<Vec<f64>>,
}

fn normal_vec(rng: &mut Stream, n: usize, scale: f64) -> Vec<f64> {
    use rand::Rng;
    (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * scale)
        .collect()
}

fn build_bank(spec: &SyntheticSpec) -> ClassBank {
    let mut rng = Stream::derive(spec.seed, "datasynth/codes");
    let shared = (0..spec.classes)
        .map(|_| normal_vec(&mut rng, spec.shared_dim, 1.0))
        .collect();
    let specific = (0..spec.classes)
        .map(|_| {
            (0..spec.modalities)
                .map(|_| normal_vec(&mut rng, spec.specific_dim, 1.0))
                .collect()
        })
        .collect();
    let shared_scale = (1.0 / spec.shared_dim as f64).sqrt();
    let specific_scale = if spec.specific_dim > 0 {
        (1.0 / spec.specific_dim as f64).sqrt()
    } else {
        0.0
    };
    let proj_shared = (0..spec.modalities)
        .map(|v| normal_vec(&mut rng, spec.input_dims[v] * spec.shared_dim, shared_scale))
        .collect();
    let proj_specific = (0..spec.modalities)
        .map(|v| normal_vec(&mut rng, spec.input_dims[v] * spec.specific_dim, specific_scale))
        .collect();
    ClassBank {
        shared,
        specific,
        proj_shared,
        proj_specific,
    }
}

fn make_sample(spec: &SyntheticSpec, bank: &ClassBank, split: &str, i: usize) -> MultimodalSample {
    use rand::Rng;
    let label = 1 + i % spec.classes;
    let y = label - 1;
    let mut rng = Stream::derive(spec.seed, &format!("datasynth/{split}/{i}"));
    let modalities = (0..spec.modalities)
        .map(|v| {
            let d = spec.input_dims[v];
            let mut x = vec![0.0; d];
            let ps = &bank.proj_shared[v];
            let pq = &bank.proj_specific[v];
            for (row, xo) in x.iter_mut().enumerate() {
                let mut signal = 0.0;
                for (k, &u) in bank.shared[y].iter().enumerate() {
                    signal += ps[row * spec.shared_dim + k] * u;
                }
                for (k, &w) in bank.specific[y][v].iter().enumerate() {
                    signal += pq[row * spec.specific_dim + k] * w;
                }
                *xo = spec.snr[v] * signal;
            }
            // Noise draws come after the deterministic signal, one pass per
            // modality, so the stream layout is stable.
            for xo in x.iter_mut() {
                *xo += rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            x
        })
        .collect();
    MultimodalSample { modalities, label }
}

/// Generate both splits. Labels are assigned round-robin so class counts
/// differ by at most one, and train/test use disjoint stream labels.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let bank = build_bank(spec);
    let train = parallel::ordered_map_indexed(spec.train_size, |i| make_sample(spec, &bank, "train", i));
    let test = parallel::ordered_map_indexed(spec.test_size, |i| make_sample(spec, &bank, "test", i));
    Ok(Dataset {
        spec: spec.clone(),
        train,
        test,
    })
}

/// Sequential twin of [`generate`]; benches compare the two.
pub fn generate_seq(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let bank = build_bank(spec);
    let train =
        parallel::ordered_map_indexed_seq(spec.train_size, |i| make_sample(spec, &bank, "train", i));
    let test = parallel::ordered_map_indexed_seq(spec.test_size, |i| make_sample(spec, &bank, "test", i));
    Ok(Dataset {
        spec: spec.clone(),
        train,
        test,
    })
}
