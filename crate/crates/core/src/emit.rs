//! Deterministic artifact writers. Identical runs must produce byte-equal
//! files, so every writer formats floats through the shortest round-trip
//! representation, orders rows explicitly, and keeps wall-clock time out of
//! the run record entirely.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::datasynth::MultimodalSample;
use crate::error::{DmrError, Result};
use crate::metrics::{CombinationResultTable, PairDiversity};
use crate::mining::HardSet;
use crate::sweep::{SweepOutcome, SweepRow, SweepSummary};
use crate::train::{ExperimentResult, MineRecord, StepRecord};

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, content)?;
    Ok(())
}

fn json_err(e: serde_json::Error) -> DmrError {
    DmrError::InvalidInput(format!("serialization failed: {e}"))
}

/// One JSON object per optimizer step.
pub fn steps_jsonl_string(steps: &[StepRecord]) -> Result<String> {
    let mut out = String::new();
    for s in steps {
        out.push_str(&serde_json::to_string(s).map_err(json_err)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_steps_jsonl(path: &Path, steps: &[StepRecord]) -> Result<()> {
    write_file(path, &steps_jsonl_string(steps)?)
}

/// Epoch-boundary variance table, flat across epochs.
pub fn mine_csv_string(mines: &[MineRecord], config_hash: &str) -> String {
    let mut out = format!("# config_hash={config_hash}\n");
    out.push_str("epoch,index,bit_string,d,elements,in_hard_set\n");
    for m in mines {
        for r in &m.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                m.epoch, r.index, r.bit_string, r.d, r.elements, r.in_hard_set
            );
        }
    }
    out
}

pub fn write_mine_csv(path: &Path, mines: &[MineRecord], config_hash: &str) -> Result<()> {
    write_file(path, &mine_csv_string(mines, config_hash))
}

/// Per-combination metric table plus the closing average row.
pub fn eval_csv_string(table: &CombinationResultTable, config_hash: &str) -> String {
    let mut out = format!("# config_hash={config_hash}\n");
    let _ = writeln!(out, "index,bit_string,{},n_samples", table.metric);
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.mask.index(),
            r.mask.bit_string(),
            r.value,
            r.n_samples
        );
    }
    let n = table.rows.first().map_or(0, |r| r.n_samples);
    let _ = writeln!(out, "average,,{},{}", table.average, n);
    out
}

pub fn write_eval_csv(path: &Path, table: &CombinationResultTable, config_hash: &str) -> Result<()> {
    write_file(path, &eval_csv_string(table, config_hash))
}

#[derive(Debug, Serialize)]
struct RunEvalRow {
    index: u64,
    bit_string: String,
    value: f64,
    n_samples: usize,
}

/// The machine-readable summary of a finished run. Deliberately contains
/// nothing time- or host-dependent.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub mode: String,
    pub seed: u64,
    pub epochs: usize,
    pub eval_metric: String,
    pub final_mean_sigma_sq: Option<f64>,
    pub hard: Option<HardSet>,
    pub average: f64,
    per_combination: Vec<RunEvalRow>,
}

pub fn run_record(config: &ExperimentConfig, result: &ExperimentResult) -> RunRecord {
    RunRecord {
        config_hash: config.hash(),
        mode: config.mode.to_string(),
        seed: config.seed,
        epochs: config.epochs,
        eval_metric: config.eval_metric.to_string(),
        final_mean_sigma_sq: result.final_mean_sigma_sq,
        hard: result.hard.clone(),
        average: result.eval.average,
        per_combination: result
            .eval
            .rows
            .iter()
            .map(|r| RunEvalRow {
                index: r.mask.index(),
                bit_string: r.mask.bit_string(),
                value: r.value,
                n_samples: r.n_samples,
            })
            .collect(),
    }
}

pub fn run_json_string(config: &ExperimentConfig, result: &ExperimentResult) -> Result<String> {
    let mut s =
        serde_json::to_string_pretty(&run_record(config, result)).map_err(json_err)?;
    s.push('\n');
    Ok(s)
}

pub fn write_run_json(path: &Path, config: &ExperimentConfig, result: &ExperimentResult) -> Result<()> {
    write_file(path, &run_json_string(config, result)?)
}

/// Wall-clock time lives in its own file so everything else stays
/// byte-comparable between reruns.
pub fn write_timing_json(path: &Path, wall_seconds: f64) -> Result<()> {
    let body = serde_json::json!({ "wall_seconds": wall_seconds });
    write_file(path, &format!("{body}\n"))
}

/// Histogram rows for every requested modality pair.
pub fn diversity_csv_string(pairs: &[PairDiversity], config_hash: &str) -> String {
    let mut out = format!("# config_hash={config_hash}\n");
    out.push_str("pair,mode,formula,bin_lo,bin_hi,count\n");
    for p in pairs {
        let h = &p.histogram;
        for (i, &count) in h.counts.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}-{},{},{},{},{},{}",
                p.pair.0, p.pair.1, h.mode, h.formula, h.edges[i], h.edges[i + 1], count
            );
        }
    }
    out
}

pub fn write_diversity_csv(path: &Path, pairs: &[PairDiversity], config_hash: &str) -> Result<()> {
    write_file(path, &diversity_csv_string(pairs, config_hash))
}

pub fn diversity_json_string(pairs: &[PairDiversity]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(pairs).map_err(json_err)?;
    s.push('\n');
    Ok(s)
}

pub fn write_diversity_json(path: &Path, pairs: &[PairDiversity]) -> Result<()> {
    write_file(path, &diversity_json_string(pairs)?)
}

pub fn sweep_csv_string(rows: &[SweepRow], config_hash: &str) -> String {
    let mut out = format!("# config_hash={config_hash}\n");
    out.push_str("alpha,beta,seed,status,mean_sigma_sq,average_metric,full_metric,error\n");
    for r in rows {
        match &r.outcome {
            SweepOutcome::Finished {
                mean_sigma_sq,
                average_metric,
                full_metric,
            } => {
                let _ = writeln!(
                    out,
                    "{},{},{},finished,{},{},{},",
                    r.alpha, r.beta, r.seed, mean_sigma_sq, average_metric, full_metric
                );
            }
            SweepOutcome::Failed { error } => {
                let clean = error.replace([',', '\n'], ";");
                let _ = writeln!(out, "{},{},{},failed,,,,{clean}", r.alpha, r.beta, r.seed);
            }
        }
    }
    out
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow], config_hash: &str) -> Result<()> {
    write_file(path, &sweep_csv_string(rows, config_hash))
}

pub fn sweep_summary_csv_string(summaries: &[SweepSummary], config_hash: &str) -> String {
    let mut out = format!("# config_hash={config_hash}\n");
    out.push_str("alpha,beta,finished,failed,mean_sigma_sq,average_metric\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.alpha, s.beta, s.finished, s.failed, s.mean_sigma_sq, s.average_metric
        );
    }
    out
}

pub fn write_sweep_summary_csv(
    path: &Path,
    summaries: &[SweepSummary],
    config_hash: &str,
) -> Result<()> {
    write_file(path, &sweep_summary_csv_string(summaries, config_hash))
}

/// One JSON object per sample; labels are 1-based.
pub fn samples_jsonl_string(samples: &[MultimodalSample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).map_err(json_err)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_samples_jsonl(path: &Path, samples: &[MultimodalSample]) -> Result<()> {
    write_file(path, &samples_jsonl_string(samples)?)
}

/// The standard artifact set of a training run, written under `dir`.
pub fn write_run_artifacts(
    dir: &Path,
    config: &ExperimentConfig,
    result: &ExperimentResult,
) -> Result<Vec<PathBuf>> {
    let hash = config.hash();
    let steps = dir.join("steps.jsonl");
    let mine = dir.join("mine.csv");
    let eval = dir.join("eval.csv");
    let run = dir.join("run.json");
    let config_echo = dir.join("config.toml");
    write_steps_jsonl(&steps, &result.steps)?;
    write_mine_csv(&mine, &result.mines, &hash)?;
    write_eval_csv(&eval, &result.eval, &hash)?;
    write_run_json(&run, config, result)?;
    write_file(&config_echo, &config.to_toml_string()?)?;
    Ok(vec![steps, mine, eval, run, config_echo])
}
