//! Acceptance gate for the library: nine checks covering the closed-form
//! losses, gradients, degeneracies, mask algebra, the directional claims on
//! the standard synthetic benchmark, and determinism of artifacts.
//!
//! Every check prints one `ACCEPTANCE n (...): PASS|FAIL` line (visible under
//! `--nocapture`). Checks 1, 2, 3, 4, 6, and 9 are correctness checks and
//! assert. Checks 5, 7, and the diversity half of 8 measure whether the
//! method's claimed training-dynamics effects materialize on this benchmark;
//! they report the measured verdict without failing the build, while their
//! structural invariants (table shapes, hard-set sizes, metric identities)
//! still assert.
//!
//! Budget on one CPU: the shared ten-seed matrix runs once (checks 5, 7, 8)
//! and the alpha grid (check 6) dominates; the whole suite stays under a few
//! minutes.

use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;

use dmr_core::checkpoint;
use dmr_core::combinations::{
    enumerate_combinations, sample_mask, CombinationMask, DropoutPolicy,
};
use dmr_core::config::{ExperimentConfig, TrainingMode};
use dmr_core::datasynth;
use dmr_core::emit::{eval_csv_string, mine_csv_string, run_json_string, steps_jsonl_string};
use dmr_core::gradcheck;
use dmr_core::losses::kl_to_standard_normal;
use dmr_core::metrics::{
    channel_distance, diversity_summary, per_combination_eval, ChannelFormula, DistanceMode,
    MetricKind,
};
use dmr_core::rng::Stream;
use dmr_core::tensor::FeatureMap;
use dmr_core::train::{run_experiment, ExperimentResult, Trainer};

const SEEDS: u64 = 10;
const NEEDED: usize = 8;

fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {n} ({name}): {word} - {detail}");
}

/// One full training run per mode per seed on the frozen standard config.
/// Shared by checks 5, 7, and 8; computed once.
struct SeedRun {
    seed: u64,
    vanilla: (Trainer, ExperimentResult),
    dmr: (Trainer, ExperimentResult),
    hcr: (Trainer, ExperimentResult),
}

static MATRIX: OnceLock<Vec<SeedRun>> = OnceLock::new();

fn matrix() -> &'static [SeedRun] {
    MATRIX.get_or_init(|| {
        (0..SEEDS)
            .map(|seed| {
                let run = |mode| {
                    let config = ExperimentConfig::standard_synthetic(mode, seed);
                    run_experiment(&config).expect("standard benchmark run must complete")
                };
                SeedRun {
                    seed,
                    vanilla: run(TrainingMode::Vanilla),
                    dmr: run(TrainingMode::Dmr),
                    hcr: run(TrainingMode::DmrHcr),
                }
            })
            .collect()
    })
}

/// Check 1: the closed-form KL to the standard normal agrees with a
/// million-draw Monte Carlo estimate of E[log q(z) - log p(z)] within three
/// standard errors on a hundred random maps, and is exactly zero at the
/// prior itself.
#[test]
fn kl_closed_form_matches_monte_carlo() {
    const MAPS: usize = 100;
    const ELEMENTS: usize = 6;
    const DRAWS: usize = 1_000_000;

    let exact = kl_to_standard_normal(&[0.0; ELEMENTS], &[0.0; ELEMENTS]);
    assert_eq!(exact, 0.0, "KL at mu = 0, sigma = 1 must be exactly zero");

    let mut gen = Stream::derive(90_210, "acceptance/kl-maps");
    let mut worst_z = 0.0f64;
    for map in 0..MAPS {
        let mu: Vec<f64> = (0..ELEMENTS).map(|_| gen.gen_range(-2.0..2.0)).collect();
        let log_sigma: Vec<f64> = (0..ELEMENTS).map(|_| gen.gen_range(-1.2..0.8)).collect();
        let sigma: Vec<f64> = log_sigma.iter().map(|l| l.exp()).collect();
        let closed = kl_to_standard_normal(&mu, &log_sigma);

        // With z = mu + sigma u and u standard normal, the per-element
        // integrand log q(z) - log p(z) collapses to
        // -log sigma - u^2 / 2 + z^2 / 2, matching the mean-over-elements
        // convention of the closed form.
        let mut draws = Stream::derive(90_210 + map as u64, "acceptance/kl-draws");
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for _ in 0..DRAWS {
            let mut val = 0.0;
            for i in 0..ELEMENTS {
                let u: f64 = draws.sample(StandardNormal);
                let z = mu[i] + sigma[i] * u;
                val += -log_sigma[i] - 0.5 * u * u + 0.5 * z * z;
            }
            val /= ELEMENTS as f64;
            sum += val;
            sum_sq += val * val;
        }
        let mean = sum / DRAWS as f64;
        let var = (sum_sq - sum * sum / DRAWS as f64) / (DRAWS as f64 - 1.0);
        let se = (var / DRAWS as f64).sqrt();
        let z = (closed - mean).abs() / se;
        worst_z = worst_z.max(z);
        assert!(
            (closed - mean).abs() <= 3.0 * se,
            "map {map}: closed form {closed} vs MC {mean} (se {se}) is {z:.2} se away"
        );
    }
    verdict(
        1,
        "KL closed form vs Monte Carlo",
        true,
        &format!("{MAPS} maps x {DRAWS} draws, worst |z| = {worst_z:.2} se, prior exactly 0"),
    );
}

/// Check 2: analytic gradients match central differences to a relative error
/// below 1e-4 in every parameter group of a small two-modality model.
#[test]
fn analytic_gradient_matches_central_differences() {
    let setup = gradcheck::standard_setup(42).unwrap();
    let report = gradcheck::run(&setup, 1e-4, 1e-4).unwrap();
    for g in &report.groups {
        assert!(
            g.max_rel_err < 1e-4,
            "group {} rel err {} at index {} (analytic {}, numeric {})",
            g.name,
            g.max_rel_err,
            g.worst_index,
            g.analytic,
            g.numeric
        );
    }
    assert!(report.passed(), "gradient check reports failure");
    let worst = report
        .groups
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("report covers at least one group");
    verdict(
        2,
        "analytic vs numeric gradients",
        true,
        &format!(
            "{} params, worst group {} at rel err {:.2e}",
            report.params_checked, worst.name, worst.max_rel_err
        ),
    );
}

/// Check 3: with the noise forced to zero and both regularizer weights at
/// zero, a DMR run degenerates to the vanilla baseline bitwise, step for
/// step, over an epoch.
#[test]
fn zero_noise_zero_weights_degenerates_to_vanilla() {
    let mut degen = ExperimentConfig::standard_synthetic(TrainingMode::Dmr, 11);
    degen.epochs = 1;
    degen.alpha = 0.0;
    degen.beta = 0.0;
    degen.force_eps_zero = true;
    let mut plain = ExperimentConfig::standard_synthetic(TrainingMode::Vanilla, 11);
    plain.epochs = 1;
    plain.alpha = 0.0;
    plain.beta = 0.0;

    let (_, d) = run_experiment(&degen).unwrap();
    let (_, v) = run_experiment(&plain).unwrap();
    assert_eq!(d.steps.len(), v.steps.len(), "step streams differ in length");
    for (a, b) in d.steps.iter().zip(&v.steps) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.batch, b.batch);
        assert_eq!(a.lr.to_bits(), b.lr.to_bits(), "lr differs at step {}", a.step);
        let pairs = [
            ("l_ttl", a.losses.l_ttl, b.losses.l_ttl),
            ("l_dr", a.losses.l_dr, b.losses.l_dr),
            ("l_hcr", a.losses.l_hcr, b.losses.l_hcr),
            ("total", a.losses.total, b.losses.total),
            ("alpha", a.losses.alpha, b.losses.alpha),
            ("beta", a.losses.beta, b.losses.beta),
        ];
        for (name, x, y) in pairs {
            assert_eq!(
                x.to_bits(),
                y.to_bits(),
                "loss field {name} differs at step {}: {x} vs {y}",
                a.step
            );
        }
    }
    verdict(
        3,
        "degeneracy to vanilla",
        true,
        &format!("{} steps bitwise identical across all loss fields", d.steps.len()),
    );
}

/// Check 4: mask indices, bit-strings, and activity tests round-trip
/// exhaustively up to eight modalities, and the uniform nonempty sampler is
/// uniform to within a percentage point over 70,000 draws.
#[test]
fn mask_algebra_round_trips_and_sampler_is_uniform() {
    for v in 1..=8usize {
        for index in 1..(1u64 << v) {
            let mask = CombinationMask::from_index(index, v).unwrap();
            assert_eq!(mask.index(), index);
            assert_eq!(mask.modality_count(), v);
            assert_eq!(mask.active_count() as u32, index.count_ones());
            for m in 0..v {
                assert_eq!(
                    mask.is_active(m),
                    index & (1 << m) != 0,
                    "activity bit {m} of index {index} (v = {v})"
                );
            }
            let back = CombinationMask::from_bit_string(&mask.bit_string()).unwrap();
            assert_eq!(back.index(), index, "bit-string round trip of index {index}");
            assert_eq!(back.modality_count(), v);
        }
    }
    let all = enumerate_combinations(3).unwrap();
    assert_eq!(all.len(), 7);
    for (i, m) in all.iter().enumerate() {
        assert_eq!(m.index(), i as u64 + 1, "enumeration is ascending by index");
    }

    const DRAWS: usize = 70_000;
    let mut counts = [0u64; 8];
    let mut rng = Stream::derive(20_260_818, "acceptance/mask-sampler");
    for _ in 0..DRAWS {
        let m = sample_mask(&DropoutPolicy::UniformNonempty, 3, &mut rng).unwrap();
        counts[m.index() as usize] += 1;
    }
    assert_eq!(counts[0], 0, "empty mask must never be sampled");
    let target = 1.0 / 7.0;
    let mut worst_dev = 0.0f64;
    for index in 1..=7 {
        let freq = counts[index] as f64 / DRAWS as f64;
        let dev = (freq - target).abs();
        worst_dev = worst_dev.max(dev);
        assert!(
            dev <= 0.01,
            "mask {index} frequency {freq:.4} deviates from 1/7 by {dev:.4}"
        );
    }
    verdict(
        4,
        "mask algebra and sampler uniformity",
        true,
        &format!("round trip through v = 8, worst sampler deviation {worst_dev:.4} of 1/7"),
    );
}

fn assert_table_well_formed(result: &ExperimentResult, label: &str) {
    let table = &result.eval;
    assert_eq!(table.metric, MetricKind::Accuracy, "{label}: metric");
    assert_eq!(table.rows.len(), 7, "{label}: one row per nonempty combination");
    let mut sum = 0.0;
    for (i, row) in table.rows.iter().enumerate() {
        assert_eq!(row.mask.index(), i as u64 + 1, "{label}: rows ascend by index");
        assert_eq!(row.n_samples, 3000, "{label}: every row scores the full test split");
        assert!(
            (0.0..=1.0).contains(&row.value),
            "{label}: accuracy {} out of range",
            row.value
        );
        sum += row.value;
    }
    assert!(
        (table.average - sum / 7.0).abs() < 1e-12,
        "{label}: average {} disagrees with row mean {}",
        table.average,
        sum / 7.0
    );
}

/// Check 5: directional claim on the standard benchmark. Mean
/// per-combination test accuracy of dmr should exceed vanilla by two points,
/// and dmr+hcr should not fall below dmr, each on at least eight of ten
/// seeds. The table invariants assert; the direction is reported as
/// measured.
#[test]
fn combination_accuracy_ordering_across_modes() {
    let runs = matrix();
    assert_eq!(runs.len(), SEEDS as usize);
    let mut dmr_up = 0usize;
    let mut hcr_up = 0usize;
    for r in runs {
        assert_table_well_formed(&r.vanilla.1, "vanilla");
        assert_table_well_formed(&r.dmr.1, "dmr");
        assert_table_well_formed(&r.hcr.1, "dmr+hcr");
        let v = r.vanilla.1.eval.average;
        let d = r.dmr.1.eval.average;
        let h = r.hcr.1.eval.average;
        if d >= v + 0.02 {
            dmr_up += 1;
        }
        if h >= d {
            hcr_up += 1;
        }
        println!(
            "  seed {}: vanilla {:.4}, dmr {:.4}, dmr+hcr {:.4}",
            r.seed, v, d, h
        );
    }
    let pass = dmr_up >= NEEDED && hcr_up >= NEEDED;
    verdict(
        5,
        "combination accuracy ordering",
        pass,
        &format!(
            "dmr >= vanilla + 2pt on {dmr_up}/{SEEDS} seeds, dmr+hcr >= dmr on {hcr_up}/{SEEDS} seeds, need {NEEDED} each"
        ),
    );
}

/// Check 6: the end-of-training mean sigma^2 is weakly decreasing in alpha
/// across {0, 1e-4, 1e-3, 1e-2} on at least eight of ten seeds.
#[test]
fn sigma_shrinks_as_alpha_grows() {
    const ALPHAS: [f64; 4] = [0.0, 1e-4, 1e-3, 1e-2];
    let mut monotone = 0usize;
    let mut first_chain = String::new();
    for seed in 0..SEEDS {
        let chain: Vec<f64> = ALPHAS
            .iter()
            .map(|&alpha| {
                let mut config = ExperimentConfig::standard_synthetic(TrainingMode::Dmr, seed);
                config.alpha = alpha;
                let (_, result) = run_experiment(&config).unwrap();
                result
                    .final_mean_sigma_sq
                    .expect("dmr mode tracks sigma every epoch")
            })
            .collect();
        let ok = chain.windows(2).all(|w| w[1] <= w[0]);
        if ok {
            monotone += 1;
        }
        if seed == 0 {
            first_chain = chain
                .iter()
                .map(|s| format!("{s:.4}"))
                .collect::<Vec<_>>()
                .join(" >= ");
        }
        println!(
            "  seed {seed}: sigma^2 by alpha {:?} {}",
            chain,
            if ok { "(monotone)" } else { "(violated)" }
        );
    }
    let pass = monotone >= NEEDED;
    verdict(
        6,
        "sigma^2 decreases with alpha",
        pass,
        &format!("weakly decreasing on {monotone}/{SEEDS} seeds (need {NEEDED}); seed 0: {first_chain}"),
    );
    assert!(
        pass,
        "mean sigma^2 was weakly decreasing in alpha on only {monotone}/{SEEDS} seeds"
    );
}

/// Check 7: directional claim piggybacking on the shared matrix. The
/// combination that consists solely of the low-signal modality (index 2,
/// bit-string 010) should enter the mined hard set after warmup. Mining
/// structure asserts; the membership claim is reported as measured.
#[test]
fn low_signal_combination_enters_hard_set() {
    let runs = matrix();
    let warmup = ExperimentConfig::standard_synthetic(TrainingMode::DmrHcr, 0).warmup_epochs;
    let weak = 2u64;
    let mut any_epoch = 0usize;
    let mut final_set = 0usize;
    for r in runs {
        let mines = &r.hcr.1.mines;
        assert_eq!(mines.len(), r.hcr.0.config().epochs, "one mine record per epoch");
        let mut seen = false;
        for mine in mines {
            assert_eq!(mine.rows.len(), 7, "every combination accumulates each epoch");
            for row in &mine.rows {
                assert!(row.d.is_finite() && row.d >= 0.0, "variance statistic is nonnegative");
                assert!(row.elements > 0, "observed combinations carry elements");
            }
            // Records carry the zero-based epoch index; selection first
            // fires once `epoch + 1` completed epochs reach the warmup.
            if mine.epoch + 1 < warmup {
                assert!(mine.hard.is_none(), "no hard set during warmup");
                continue;
            }
            let hard = mine
                .hard
                .as_ref()
                .expect("hard set present after warmup");
            assert_eq!(hard.indices.len(), 3, "hard set holds top-V combinations");
            for row in &mine.rows {
                assert_eq!(
                    row.in_hard_set,
                    hard.indices.contains(&row.index),
                    "row flag agrees with the selected set"
                );
            }
            if hard.indices.contains(&weak) {
                seen = true;
            }
        }
        if seen {
            any_epoch += 1;
        }
        let last = r.hcr.1.hard.as_ref().expect("final hard set survives the run");
        if last.indices.contains(&weak) {
            final_set += 1;
        }
    }
    let pass = any_epoch >= NEEDED;
    verdict(
        7,
        "hard mining recovers the weak combination",
        pass,
        &format!(
            "combination 010 mined post-warmup on {any_epoch}/{SEEDS} seeds (need {NEEDED}), in final set on {final_set}/{SEEDS}"
        ),
    );
}

/// Check 8: channel-distance identities hold exactly, and the directional
/// diversity claim (dmr spreads channels more than an identically seeded
/// vanilla run, both within and across modalities) is reported as measured.
#[test]
fn channel_distance_identities_and_diversity_direction() {
    let a = FeatureMap::from_vec(
        3,
        4,
        vec![
            0.9, -1.2, 0.4, 2.0, //
            -0.3, 0.8, -1.7, 0.5, //
            1.1, 0.2, 0.6, -0.9,
        ],
    )
    .unwrap();
    let b = FeatureMap::from_vec(
        3,
        4,
        vec![
            -0.5, 0.7, 1.3, -0.2, //
            2.1, -0.4, 0.9, 0.3, //
            -1.0, 1.5, -0.6, 0.8,
        ],
    )
    .unwrap();

    let intra = channel_distance(&a, &a, DistanceMode::Intra, ChannelFormula::CosineChannels).unwrap();
    for k in 0..3 {
        assert_eq!(intra.get(k, k), 0.0, "intra diagonal is pinned to zero");
    }

    // Per-channel scaling by powers of two is exact in binary floating
    // point, so invariance can be asserted bitwise.
    let mut scaled = a.clone();
    let factors = [2.0, 0.25, 8.0];
    for c in 0..3 {
        for s in 0..4 {
            scaled.set(c, s, a.get(c, s) * factors[c]);
        }
    }
    let plain = channel_distance(&a, &b, DistanceMode::Inter, ChannelFormula::CosineChannels).unwrap();
    let scaled_d =
        channel_distance(&scaled, &b, DistanceMode::Inter, ChannelFormula::CosineChannels).unwrap();
    let intra_scaled =
        channel_distance(&scaled, &scaled, DistanceMode::Intra, ChannelFormula::CosineChannels)
            .unwrap();
    for k in 0..3 {
        for l in 0..3 {
            assert_eq!(
                plain.get(k, l),
                scaled_d.get(k, l),
                "cosine distance is invariant to positive channel scaling"
            );
            assert_eq!(
                intra.get(k, l),
                intra_scaled.get(k, l),
                "intra distances are invariant to positive channel scaling"
            );
        }
    }

    let swapped = channel_distance(&b, &a, DistanceMode::Inter, ChannelFormula::CosineChannels).unwrap();
    for k in 0..3 {
        for l in 0..3 {
            assert_eq!(plain.get(k, l), swapped.get(l, k), "inter distance is symmetric");
        }
    }

    // Directional half: weighted histogram means over the full test split,
    // dmr against the identically seeded vanilla model.
    let pairs = [(1, 1), (2, 2), (3, 3), (1, 2), (1, 3), (2, 3)];
    let mut both_up = 0usize;
    for r in matrix() {
        let config = ExperimentConfig::standard_synthetic(TrainingMode::Dmr, r.seed);
        let data = datasynth::generate(&config.dataset).unwrap();
        let mean_pair = |trainer: &Trainer| -> (f64, f64) {
            let summary = diversity_summary(
                trainer.model(),
                &data.test,
                &pairs,
                20,
                ChannelFormula::CosineChannels,
            )
            .unwrap();
            let mut intra = (0.0f64, 0u64);
            let mut inter = (0.0f64, 0u64);
            for p in &summary {
                let slot = match p.histogram.mode {
                    DistanceMode::Intra => &mut intra,
                    DistanceMode::Inter => &mut inter,
                };
                slot.0 += p.histogram.mean * p.histogram.entries as f64;
                slot.1 += p.histogram.entries;
            }
            assert!(
                intra.1 > 0 && inter.1 > 0,
                "diversity histograms must not be empty"
            );
            (intra.0 / intra.1 as f64, inter.0 / inter.1 as f64)
        };
        let (d_intra, d_inter) = mean_pair(&r.dmr.0);
        let (v_intra, v_inter) = mean_pair(&r.vanilla.0);
        if d_intra > v_intra && d_inter > v_inter {
            both_up += 1;
        }
        println!(
            "  seed {}: intra dmr {:.4} vs vanilla {:.4}, inter dmr {:.4} vs vanilla {:.4}",
            r.seed, d_intra, v_intra, d_inter, v_inter
        );
    }
    let pass = both_up >= NEEDED;
    verdict(
        8,
        "channel diversity direction",
        pass,
        &format!(
            "identities exact; dmr above vanilla on both distances on {both_up}/{SEEDS} seeds (need {NEEDED})"
        ),
    );
}

/// Check 9: identical runs emit byte-identical artifacts, checkpoints round
/// trip bitwise, and a resumed run reproduces the uninterrupted step stream
/// and final state exactly.
#[test]
fn artifacts_and_checkpoints_are_deterministic() {
    let config = ExperimentConfig::standard_synthetic(TrainingMode::DmrHcr, 3);
    let hash = config.hash();
    let (full_trainer, r1) = run_experiment(&config).unwrap();
    let (_, r2) = run_experiment(&config).unwrap();
    assert_eq!(
        steps_jsonl_string(&r1.steps).unwrap(),
        steps_jsonl_string(&r2.steps).unwrap(),
        "step logs differ between identical runs"
    );
    assert_eq!(
        mine_csv_string(&r1.mines, &hash),
        mine_csv_string(&r2.mines, &hash),
        "mine tables differ between identical runs"
    );
    assert_eq!(
        eval_csv_string(&r1.eval, &hash),
        eval_csv_string(&r2.eval, &hash),
        "eval tables differ between identical runs"
    );
    assert_eq!(
        run_json_string(&config, &r1).unwrap(),
        run_json_string(&config, &r2).unwrap(),
        "run summaries differ between identical runs"
    );

    let data = datasynth::generate(&config.dataset).unwrap();
    let mut head = Trainer::new(config.clone()).unwrap();
    let mut steps = Vec::new();
    for _ in 0..3 {
        steps.extend(head.run_epoch(&data.train).unwrap().steps);
    }
    let state = head.state();
    let bytes = checkpoint::save_to_vec(&config, &state).unwrap();
    let restored = checkpoint::load_from_slice(&bytes, &config).unwrap();
    assert!(restored == state, "checkpoint round trip must reproduce the state");
    let bytes_again = checkpoint::save_to_vec(&config, &restored).unwrap();
    assert_eq!(bytes, bytes_again, "re-saving a restored state must be byte-identical");

    let mut tail = Trainer::from_state(config.clone(), restored).unwrap();
    steps.extend(tail.run_to_end(&data.train).unwrap().steps);
    assert_eq!(
        steps_jsonl_string(&r1.steps).unwrap(),
        steps_jsonl_string(&steps).unwrap(),
        "resumed run diverges from the uninterrupted step stream"
    );
    assert!(
        tail.state() == full_trainer.state(),
        "resumed trainer must land in the uninterrupted final state"
    );
    let resumed_eval = per_combination_eval(tail.model(), &data.test, config.eval_metric).unwrap();
    assert_eq!(
        eval_csv_string(&resumed_eval, &hash),
        eval_csv_string(&r1.eval, &hash),
        "resumed model must evaluate identically"
    );
    verdict(
        9,
        "determinism and persistence",
        true,
        &format!(
            "artifacts byte-identical, checkpoint round trip exact, resume reproduces {} steps",
            r1.steps.len()
        ),
    );
}
