//! Finite-difference verification of the analytic gradient. The forward
//! pass is side-effect free, so central differences over the flat parameter
//! vector are an independent oracle for the whole backward pass.

use std::collections::BTreeSet;

use rand::Rng;

use crate::combinations::CombinationMask;
use crate::datasynth::{self, MultimodalSample, SyntheticSpec};
use crate::error::{DmrError, Result};
use crate::losses::batch_losses;
use crate::model::{
    backward_batch, forward_batch, standard_normal_map, Model, ModelDims, NormSource,
};
use crate::parallel;
use crate::rng::Stream;
use crate::tensor::FeatureMap;

/// Worst relative error seen inside one named parameter group.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub params_checked: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// A frozen batch: model, inputs, masks, noise, and hard set all pinned so
/// the loss is a deterministic function of the parameter vector alone.
pub struct GradCheckSetup {
    pub model: Model,
    pub samples: Vec<MultimodalSample>,
    pub masks: Vec<CombinationMask>,
    pub eps: Option<Vec<FeatureMap>>,
    pub hard: BTreeSet<u64>,
    pub alpha: f64,
    pub beta: f64,
}

impl GradCheckSetup {
    pub fn loss_at(&self, params: &[f64]) -> Result<f64> {
        let mut model = self.model.clone();
        model.params = params.to_vec();
        let refs: Vec<&MultimodalSample> = self.samples.iter().collect();
        let cache = forward_batch(
            &model,
            &refs,
            &self.masks,
            self.eps.as_deref(),
            NormSource::Minibatch,
        )?;
        Ok(batch_losses(&cache, Some(&self.hard), self.alpha, self.beta)?.total)
    }

    pub fn analytic_gradient(&self) -> Result<Vec<f64>> {
        let refs: Vec<&MultimodalSample> = self.samples.iter().collect();
        let cache = forward_batch(
            &self.model,
            &refs,
            &self.masks,
            self.eps.as_deref(),
            NormSource::Minibatch,
        )?;
        Ok(backward_batch(
            &self.model,
            &cache,
            self.alpha,
            self.beta,
            Some(&self.hard),
        ))
    }
}

/// A small model and batch that still exercises every term: sampled noise,
/// both regularizer weights live, a mix of hard and ordinary samples, and a
/// dropped modality. Parameters are randomized away from their init values
/// so no gradient path sits at an accidental zero.
pub fn standard_setup(seed: u64) -> Result<GradCheckSetup> {
    let dims = ModelDims {
        modalities: 2,
        input_dims: vec![5, 4],
        hidden: 5,
        channels: 3,
        spatial: 2,
        classes: 3,
    };
    let mut init = Stream::derive(seed, "gradcheck/init");
    let mut model = Model::new(dims, &mut init)?;

    let mut jitter = Stream::derive(seed, "gradcheck/jitter");
    for p in model.params.iter_mut() {
        *p += jitter.gen_range(-0.3..0.3);
    }
    // Pin the sigma head's scale to a known-nonzero range regardless of how
    // initialization sets it, so the whole sigma path carries signal.
    let gamma_id = model.layout().head_sigma.gamma;
    let (off, len) = {
        let info = model.layout().info(gamma_id);
        (info.offset, info.len)
    };
    for p in &mut model.params[off..off + len] {
        *p = jitter.gen_range(0.4..1.1);
    }

    let spec = SyntheticSpec {
        modalities: 2,
        classes: 3,
        input_dims: vec![5, 4],
        snr: vec![1.0, 0.8],
        shared_dim: 2,
        specific_dim: 1,
        train_size: 4,
        test_size: 1,
        seed,
    };
    let data = datasynth::generate(&spec)?;
    let samples = data.train;

    let masks = vec![
        CombinationMask::from_bit_string("11")?,
        CombinationMask::from_bit_string("10")?,
        CombinationMask::from_bit_string("01")?,
        CombinationMask::from_bit_string("11")?,
    ];
    let mut eps_stream = Stream::derive(seed, "gradcheck/eps");
    let eps = (0..samples.len())
        .map(|_| standard_normal_map(3, 2, &mut eps_stream))
        .collect();

    // Indices 1 and 3 are hard, so the batch holds three hard samples and
    // one ordinary one.
    let hard: BTreeSet<u64> = [1u64, 3].into_iter().collect();

    Ok(GradCheckSetup {
        model,
        samples,
        masks,
        eps: Some(eps),
        hard,
        alpha: 0.37,
        beta: 0.59,
    })
}

/// Compare a claimed gradient against central differences of the loss.
/// Relative error per parameter is `|a - n| / max(|a| + |n|, 1e-6)`. The
/// floor absorbs finite-difference cancellation noise (about 1e-12 per
/// entry at step 1e-4) on parameters whose true gradient is zero; the
/// fusion bias is one, since batch normalization removes any constant
/// channel shift exactly.
pub fn compare_gradients(
    setup: &GradCheckSetup,
    analytic: &[f64],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let total = setup.model.param_count();
    if analytic.len() != total {
        return Err(DmrError::InvalidInput(format!(
            "gradient has {} entries, model has {total}",
            analytic.len()
        )));
    }
    if !(step > 0.0) || !(tolerance > 0.0) {
        return Err(DmrError::InvalidInput(
            "step and tolerance must be positive".into(),
        ));
    }

    let base = setup.model.params.clone();
    let numeric: Result<Vec<f64>> = parallel::ordered_map_indexed(total, |i| {
        let mut params = base.clone();
        params[i] = base[i] + step;
        let lp = setup.loss_at(&params)?;
        params[i] = base[i] - step;
        let lm = setup.loss_at(&params)?;
        Ok((lp - lm) / (2.0 * step))
    })
    .into_iter()
    .collect();
    let numeric = numeric?;

    let mut groups = Vec::new();
    let mut overall = 0.0f64;
    for info in setup.model.layout().groups() {
        let mut worst = GroupReport {
            name: info.name.clone(),
            max_rel_err: -1.0,
            worst_index: info.offset,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in info.offset..info.offset + info.len {
            let (a, n) = (analytic[i], numeric[i]);
            let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_index = i;
                worst.analytic = a;
                worst.numeric = n;
            }
        }
        overall = overall.max(worst.max_rel_err);
        groups.push(worst);
    }

    Ok(GradCheckReport {
        groups,
        max_rel_err: overall,
        params_checked: total,
        step,
        tolerance,
    })
}

/// Check the implemented backward pass on `setup`.
pub fn run(setup: &GradCheckSetup, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let analytic = setup.analytic_gradient()?;
    compare_gradients(setup, &analytic, step, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let setup = standard_setup(42).unwrap();
        let report = run(&setup, 1e-4, 1e-4).unwrap();
        assert!(
            report.passed(),
            "gradient check failed: worst group {:?}",
            report
                .groups
                .iter()
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        );
        assert_eq!(report.params_checked, setup.model.param_count());
    }

    #[test]
    fn mean_path_gradient_also_matches() {
        let mut setup = standard_setup(7).unwrap();
        setup.eps = None;
        setup.alpha = 0.0;
        setup.beta = 0.0;
        let report = run(&setup, 1e-4, 1e-4).unwrap();
        assert!(report.passed(), "vanilla path check failed: {:?}", report.max_rel_err);
    }

    #[test]
    fn every_group_is_covered() {
        let setup = standard_setup(3).unwrap();
        let report = run(&setup, 1e-4, 1e-4).unwrap();
        let names: Vec<&str> = report.groups.iter().map(|g| g.name.as_str()).collect();
        for expect in [
            "encoder0.w1",
            "encoder1.w2",
            "fusion.weight",
            "head_mu.gamma",
            "head_sigma.beta",
            "classifier.weight",
        ] {
            assert!(names.contains(&expect), "group {expect} missing from report");
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let setup = standard_setup(42).unwrap();
        let mut grads = setup.analytic_gradient().unwrap();
        let victim = grads.len() / 2;
        grads[victim] += 0.5;
        let report = compare_gradients(&setup, &grads, 1e-4, 1e-4).unwrap();
        assert!(
            !report.passed(),
            "a corrupted gradient entry must fail the check"
        );
    }
}
