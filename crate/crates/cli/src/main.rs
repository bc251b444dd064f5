//! Command-line harness around the training library. Every subcommand maps
//! configuration problems to exit code 2, divergence to 3, and artifact
//! integrity failures to 4; anything else that goes wrong exits 1.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dmr_core::checkpoint;
use dmr_core::combinations::CombinationMask;
use dmr_core::config::{ExperimentConfig, TrainingMode};
use dmr_core::datasynth::{self, Dataset};
use dmr_core::emit;
use dmr_core::gradcheck;
use dmr_core::metrics::{
    diversity_summary, per_combination_eval, ChannelFormula, CombinationResultTable, MetricKind,
};
use dmr_core::mining::{offline_variances, select_hard_set};
use dmr_core::sweep::{run_sweep, summarize};
use dmr_core::train::{finish_run, Trainer};
use dmr_core::{DmrError, Result};

#[derive(Parser)]
#[command(
    name = "dmr",
    version,
    about = "Train and probe probabilistic multimodal embeddings on a synthetic benchmark"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

/// Configuration sources, later ones override earlier ones: built-in
/// defaults, then --config, then individual flags.
#[derive(Args, Default)]
struct ConfigFlags {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// vanilla, dmr, or dmr+hcr.
    #[arg(long)]
    mode: Option<TrainingMode>,
    /// Run seed; also sets the dataset seed (see --dataset-seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the distribution regularizer.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the hard-combination term.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs before the first hard-set selection.
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Pin the sampled path to the mean without touching loss weights.
    #[arg(long)]
    force_eps_zero: bool,
    /// accuracy or acer.
    #[arg(long)]
    eval_metric: Option<MetricKind>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Dataset seed alone, applied after --seed.
    #[arg(long)]
    dataset_seed: Option<u64>,
}

impl ConfigFlags {
    fn any_override(&self) -> bool {
        self.mode.is_some()
            || self.seed.is_some()
            || self.alpha.is_some()
            || self.beta.is_some()
            || self.epochs.is_some()
            || self.batch_size.is_some()
            || self.warmup_epochs.is_some()
            || self.learning_rate.is_some()
            || self.force_eps_zero
            || self.eval_metric.is_some()
            || self.train_size.is_some()
            || self.test_size.is_some()
            || self.dataset_seed.is_some()
    }

    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.dataset.seed = s;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(w) = self.warmup_epochs {
            cfg.warmup_epochs = w;
        }
        if let Some(lr) = self.learning_rate {
            cfg.optimizer.learning_rate = lr;
        }
        if self.force_eps_zero {
            cfg.force_eps_zero = true;
        }
        if let Some(m) = self.eval_metric {
            cfg.eval_metric = m;
        }
        if let Some(n) = self.train_size {
            cfg.dataset.train_size = n;
        }
        if let Some(n) = self.test_size {
            cfg.dataset.test_size = n;
        }
        if let Some(s) = self.dataset_seed {
            cfg.dataset.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write run artifacts plus a final checkpoint.
    Train {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Output directory for artifacts.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Continue from a checkpoint under its embedded configuration;
        /// configuration flags are rejected alongside this.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Where to write the final checkpoint (default {out}/final.ckpt).
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
    },
    /// Evaluate a checkpointed model over every modality combination.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the configured metric.
        #[arg(long)]
        metric: Option<MetricKind>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Write CSV here instead of printing the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Channel-distance histograms between modality feature maps.
    Diversity {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated pairs like 1-2,2-3; m-m is the intra histogram.
        /// Defaults to every pair including intra.
        #[arg(long)]
        pairs: Option<String>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// cosine-channels or row-normalized-gram.
        #[arg(long, default_value = "cosine-channels")]
        formula: ChannelFormula,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Cap the number of samples scanned (0 = all).
        #[arg(long, default_value_t = 0)]
        sample_limit: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Offline per-combination variance table for a checkpointed model.
    Mine {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Hard-set size to preview (default: the configured size).
        #[arg(long)]
        size: Option<usize>,
        /// Write CSV here instead of printing the table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an alpha/beta grid, one full run per point and seed.
    Sweep {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Comma-separated alpha values.
        #[arg(long, default_value = "0,1e-4,1e-3,1e-2")]
        alphas: String,
        /// Comma-separated beta values (default: the base beta).
        #[arg(long)]
        betas: Option<String>,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Verify the analytic gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Generate the configured dataset and write it as JSON lines.
    ExportData {
        #[command(flatten)]
        flags: ConfigFlags,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn exit_code(err: &DmrError) -> i32 {
    match err {
        DmrError::InvalidConfig(_) | DmrError::InvalidInput(_) | DmrError::Incompatible(_) => 2,
        DmrError::Divergence { .. } => 3,
        DmrError::Integrity(_) => 4,
        _ => 1,
    }
}

fn load_trainer(path: &Path) -> Result<(ExperimentConfig, Trainer)> {
    let cfg = checkpoint::peek_config_file(path)?;
    let state = checkpoint::load(path, &cfg)?;
    let trainer = Trainer::from_state(cfg.clone(), state)?;
    Ok((cfg, trainer))
}

fn split_of<'d>(data: &'d Dataset, split: Split) -> &'d [datasynth::MultimodalSample] {
    match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    }
}

fn print_eval_table(table: &CombinationResultTable) {
    println!("index  combination  {:>9}  samples", table.metric.to_string());
    for r in &table.rows {
        println!(
            "{:>5}  {:>11}  {:>9.4}  {:>7}",
            r.mask.index(),
            r.mask.bit_string(),
            r.value,
            r.n_samples
        );
    }
    println!("average over combinations: {:.4}", table.average);
}

fn cmd_train(
    flags: ConfigFlags,
    out: PathBuf,
    resume: Option<PathBuf>,
    checkpoint_out: Option<PathBuf>,
) -> Result<()> {
    let started = Instant::now();
    let (cfg, mut trainer) = match resume {
        Some(ckpt) => {
            if flags.any_override() || flags.config.is_some() {
                return Err(DmrError::InvalidConfig(
                    "--resume continues under the checkpoint's embedded configuration; \
                     configuration flags cannot be combined with it"
                        .into(),
                ));
            }
            load_trainer(&ckpt)?
        }
        None => {
            let cfg = flags.resolve()?;
            let trainer = Trainer::new(cfg.clone())?;
            (cfg, trainer)
        }
    };

    let data = datasynth::generate(&cfg.dataset)?;
    let result = finish_run(&mut trainer, &data)?;

    let files = emit::write_run_artifacts(&out, &cfg, &result)?;
    let ckpt_path = checkpoint_out.unwrap_or_else(|| out.join("final.ckpt"));
    checkpoint::save(&ckpt_path, &cfg, &trainer.state())?;
    emit::write_timing_json(&out.join("timing.json"), started.elapsed().as_secs_f64())?;

    println!(
        "trained {} epochs ({} steps) in mode {}",
        trainer.epochs_done(),
        trainer.global_step(),
        cfg.mode
    );
    println!(
        "average {} over {} combinations: {:.4}",
        cfg.eval_metric,
        result.eval.rows.len(),
        result.eval.average
    );
    if let Some(d) = result.final_mean_sigma_sq {
        println!("final mean sigma^2: {d:.4}");
    }
    // Every mode tracks the would-be hard set for diagnostics; only report
    // it when the loss actually used it.
    if cfg.mode == TrainingMode::DmrHcr {
        if let Some(h) = &result.hard {
            let members: Vec<String> = h.indices.iter().map(|j| j.to_string()).collect();
            println!("hard set: {{{}}}", members.join(", "));
        }
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn cmd_eval(
    checkpoint_path: PathBuf,
    metric: Option<MetricKind>,
    split: Split,
    out: Option<PathBuf>,
) -> Result<()> {
    let (cfg, trainer) = load_trainer(&checkpoint_path)?;
    let data = datasynth::generate(&cfg.dataset)?;
    let metric = metric.unwrap_or(cfg.eval_metric);
    let table = per_combination_eval(trainer.model(), split_of(&data, split), metric)?;
    match out {
        Some(path) => {
            emit::write_eval_csv(&path, &table, &cfg.hash())?;
            println!("wrote {}", path.display());
        }
        None => print_eval_table(&table),
    }
    Ok(())
}

fn parse_pairs(text: &str, modalities: usize) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for part in text.split(',') {
        let (a, b) = part.trim().split_once('-').ok_or_else(|| {
            DmrError::InvalidConfig(format!("pair {part:?} is not of the form m-n"))
        })?;
        let m: usize = a
            .parse()
            .map_err(|_| DmrError::InvalidConfig(format!("bad modality in pair {part:?}")))?;
        let n: usize = b
            .parse()
            .map_err(|_| DmrError::InvalidConfig(format!("bad modality in pair {part:?}")))?;
        if m == 0 || n == 0 || m > modalities || n > modalities {
            return Err(DmrError::InvalidConfig(format!(
                "pair {part:?} outside 1..={modalities}"
            )));
        }
        pairs.push((m, n));
    }
    if pairs.is_empty() {
        return Err(DmrError::InvalidConfig("no pairs given".into()));
    }
    Ok(pairs)
}

fn all_pairs(modalities: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for m in 1..=modalities {
        for n in m..=modalities {
            out.push((m, n));
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_diversity(
    checkpoint_path: PathBuf,
    pairs: Option<String>,
    bins: usize,
    formula: ChannelFormula,
    split: Split,
    sample_limit: usize,
    out: PathBuf,
) -> Result<()> {
    let (cfg, trainer) = load_trainer(&checkpoint_path)?;
    let data = datasynth::generate(&cfg.dataset)?;
    let samples = split_of(&data, split);
    let samples = if sample_limit > 0 && sample_limit < samples.len() {
        &samples[..sample_limit]
    } else {
        samples
    };
    let pairs = match pairs {
        Some(text) => parse_pairs(&text, cfg.dataset.modalities)?,
        None => all_pairs(cfg.dataset.modalities),
    };
    let summary = diversity_summary(trainer.model(), samples, &pairs, bins, formula)?;

    for p in &summary {
        println!(
            "pair {}-{} ({}, {}): mean distance {:.4} over {} entries",
            p.pair.0, p.pair.1, p.histogram.mode, p.histogram.formula, p.histogram.mean, p.histogram.entries
        );
    }
    let csv = out.join("diversity.csv");
    let json = out.join("diversity.json");
    emit::write_diversity_csv(&csv, &summary, &cfg.hash())?;
    emit::write_diversity_json(&json, &summary)?;
    println!("wrote {}", csv.display());
    println!("wrote {}", json.display());
    Ok(())
}

fn cmd_mine(
    checkpoint_path: PathBuf,
    split: Split,
    size: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (cfg, trainer) = load_trainer(&checkpoint_path)?;
    let data = datasynth::generate(&cfg.dataset)?;
    let table = offline_variances(trainer.model(), split_of(&data, split))?;
    let size = size.unwrap_or_else(|| cfg.effective_hard_set_size());
    let hard = select_hard_set(&table, size, trainer.epochs_done())?;
    let hard_indices: BTreeSet<u64> = hard.indices;

    let mut body = String::from("index,bit_string,d,would_be_hard\n");
    println!("index  combination  mean sigma^2  hard");
    for (&j, &d) in &table {
        let mask = CombinationMask::from_index(j, cfg.dataset.modalities)?;
        let is_hard = hard_indices.contains(&j);
        println!(
            "{:>5}  {:>11}  {:>12.6}  {}",
            j,
            mask.bit_string(),
            d,
            if is_hard { "yes" } else { "" }
        );
        body.push_str(&format!("{},{},{},{}\n", j, mask.bit_string(), d, is_hard));
    }
    if let Some(path) = out {
        let content = format!("# config_hash={}\n{body}", cfg.hash());
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(&path, content)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn parse_f64_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| DmrError::InvalidConfig(format!("bad {what} value {s:?}")))
        })
        .collect()
}

fn parse_u64_list(text: &str, what: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| DmrError::InvalidConfig(format!("bad {what} value {s:?}")))
        })
        .collect()
}

fn cmd_sweep(
    flags: ConfigFlags,
    alphas: String,
    betas: Option<String>,
    seeds: String,
    out: PathBuf,
) -> Result<()> {
    let base = flags.resolve()?;
    let alphas = parse_f64_list(&alphas, "alpha")?;
    let betas = match betas {
        Some(text) => parse_f64_list(&text, "beta")?,
        None => vec![base.beta],
    };
    let seeds = parse_u64_list(&seeds, "seed")?;

    let rows = run_sweep(&base, &alphas, &betas, &seeds)?;
    let summaries = summarize(&rows);
    let hash = base.hash();
    let rows_path = out.join("sweep.csv");
    let summary_path = out.join("sweep_summary.csv");
    emit::write_sweep_csv(&rows_path, &rows, &hash)?;
    emit::write_sweep_summary_csv(&summary_path, &summaries, &hash)?;

    println!("alpha      beta   runs  mean sigma^2  avg metric");
    for s in &summaries {
        println!(
            "{:<9}  {:<5}  {:>4}  {:>12.6}  {:>10.4}",
            s.alpha, s.beta, s.finished, s.mean_sigma_sq, s.average_metric
        );
    }
    println!("wrote {}", rows_path.display());
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, step: f64, tolerance: f64) -> Result<()> {
    let setup = gradcheck::standard_setup(seed)?;
    let report = gradcheck::run(&setup, step, tolerance)?;
    println!(
        "checked {} parameters at step {:e}, tolerance {:e}",
        report.params_checked, report.step, report.tolerance
    );
    for g in &report.groups {
        println!("{:<22} max rel err {:.3e}", g.name, g.max_rel_err);
    }
    if report.passed() {
        println!("gradient check passed (worst {:.3e})", report.max_rel_err);
        Ok(())
    } else {
        eprintln!(
            "gradient check FAILED: worst relative error {:.3e} exceeds {:.1e}",
            report.max_rel_err, report.tolerance
        );
        std::process::exit(1);
    }
}

fn cmd_export_data(flags: ConfigFlags, out: PathBuf) -> Result<()> {
    let cfg = flags.resolve()?;
    let data = datasynth::generate(&cfg.dataset)?;
    let train_path = out.join("train.jsonl");
    let test_path = out.join("test.jsonl");
    emit::write_samples_jsonl(&train_path, &data.train)?;
    emit::write_samples_jsonl(&test_path, &data.test)?;
    println!(
        "wrote {} ({} samples) and {} ({} samples)",
        train_path.display(),
        data.train.len(),
        test_path.display(),
        data.test.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Train {
            flags,
            out,
            resume,
            checkpoint_out,
        } => cmd_train(flags, out, resume, checkpoint_out),
        Command::Eval {
            checkpoint,
            metric,
            split,
            out,
        } => cmd_eval(checkpoint, metric, split, out),
        Command::Diversity {
            checkpoint,
            pairs,
            bins,
            formula,
            split,
            sample_limit,
            out,
        } => cmd_diversity(checkpoint, pairs, bins, formula, split, sample_limit, out),
        Command::Mine {
            checkpoint,
            split,
            size,
            out,
        } => cmd_mine(checkpoint, split, size, out),
        Command::Sweep {
            flags,
            alphas,
            betas,
            seeds,
            out,
        } => cmd_sweep(flags, alphas, betas, seeds, out),
        Command::Gradcheck {
            seed,
            step,
            tolerance,
        } => cmd_gradcheck(seed, step, tolerance),
        Command::ExportData { flags, out } => cmd_export_data(flags, out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
