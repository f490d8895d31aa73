//! The four subcommands. Each writes its artifacts under the configured
//! output directory and returns the values it wrote.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use saft_core::model::WorkCount;
use saft_core::sensitivity::{suggest_k, OracleReport};
use saft_core::trainer::train_clean;
use saft_core::{
    brute_force_oracle, compute_stats, evaluate, kl_sensitivity, noise_injection_train,
    rank_agreement, select_top_k, Dataset, FreezePlan, ModelGraph, NoiseSpec, NoisyModel,
    OracleMetric, SensitivityReport, StatsOptions, TrainResult,
};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::plot::sensitivity_svg;

pub const REPORT_CSV: &str = "report.csv";
pub const PLOT_SVG: &str = "plot.svg";
pub const RESULT_JSON: &str = "result.json";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "model.saft";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_TXT: &str = "comparison.txt";
pub const TIMINGS_JSONL: &str = "timings.jsonl";
pub const ORACLE_CSV: &str = "oracle.csv";
pub const AGREEMENT_JSON: &str = "agreement.json";
pub const AGREEMENT_TXT: &str = "agreement.txt";

/// How many std-ranked layers the oracle's top layer is checked against.
pub const AGREEMENT_TOP_N: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Full,
    Saft,
    Clean,
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::Saft => "saft",
            TrainMode::Clean => "clean",
        }
    }
}

/// Dataset plus the (optionally pretrained) starting model.
pub struct Prepared {
    pub data: Dataset,
    pub model: ModelGraph,
    pub pretrain: Option<TrainResult>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let data = cfg.load_dataset()?;
    let mut model = match &cfg.model.checkpoint {
        Some(path) => ModelGraph::read_checkpoint(cfg.resolve(path))?,
        None => ModelGraph::build(cfg.layer_specs(), &cfg.model.input_shape, cfg.init_seed())?,
    };
    if data.train.sample_shape() != model.input_shape() {
        return Err(CliError::config(format!(
            "dataset samples have shape {:?} but the model expects {:?}",
            data.train.sample_shape(),
            model.input_shape()
        )));
    }
    let pretrain = match cfg.pretrain_config() {
        Some(p) => Some(train_clean(&mut model, &p, &data, None)?),
        None => None,
    };
    Ok(Prepared {
        data,
        model,
        pretrain,
    })
}

fn require_k(cfg: &ExperimentConfig) -> Result<usize> {
    cfg.k
        .ok_or_else(|| CliError::config("k is required (set `k` in the config or pass --k)"))
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    Ok(cfg.out_dir.join(name))
}

fn write_out(cfg: &ExperimentConfig, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = out_path(cfg, name)?;
    std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn sample_rows(cfg: &ExperimentConfig, data: &Dataset) -> Result<saft_core::LabeledBatch> {
    let rows = cfg.sensitivity_batch().min(data.train.len());
    Ok(data.train.slice(0, rows)?)
}

/// Per-layer std analysis on the configured training sample, optionally with KL.
pub fn analyse(
    cfg: &ExperimentConfig,
    model: &ModelGraph,
    data: &Dataset,
    spec: &NoiseSpec,
    with_kl: bool,
) -> Result<SensitivityReport> {
    let sample = sample_rows(cfg, data)?;
    let view = NoisyModel::new(model, *spec)?;
    let opts = StatsOptions {
        repeats: cfg.sensitivity.repeats.unwrap_or(1),
    };
    let mut report = compute_stats(model, &view, sample.inputs(), &opts)?;
    if with_kl {
        let bins = cfg
            .sensitivity
            .kl_bins
            .unwrap_or(saft_core::sensitivity::DEFAULT_KL_BINS);
        report.set_kl(&kl_sensitivity(model, &view, sample.inputs(), bins)?);
    }
    Ok(report)
}

pub struct SensitivityOutput {
    pub report: SensitivityReport,
    pub suggested_k: Option<usize>,
    pub csv_path: PathBuf,
    pub plot_path: PathBuf,
}

pub fn cmd_sensitivity(cfg: &ExperimentConfig) -> Result<SensitivityOutput> {
    let p = prepare(cfg)?;
    let spec = cfg.noise_spec()?;
    let mut report = analyse(cfg, &p.model, &p.data, &spec, true)?;
    let suggested_k = suggest_k(&report);
    if let Some(k) = cfg.k {
        select_top_k(&mut report, k)?;
    }
    let csv_path = write_out(cfg, REPORT_CSV, report.to_csv_string()?.as_bytes())?;
    let title = format!(
        "per-layer std, {} {} noise {}",
        spec.mode.name(),
        spec.distribution.name(),
        spec.distribution.param()
    );
    let plot_path = write_out(cfg, PLOT_SVG, sensitivity_svg(&report, &title).as_bytes())?;
    Ok(SensitivityOutput {
        report,
        suggested_k,
        csv_path,
        plot_path,
    })
}

/// Ranking table for the terminal; the knee suggestion is labelled as such.
pub fn render_ranking(report: &SensitivityReport, suggested_k: Option<usize>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>4}  {:<16} {:>14}  {:>12}", "rank", "layer", "std", "kl");
    for (i, id) in report.ranking().iter().enumerate() {
        let l = report.get(id).expect("ranked layers exist");
        let mark = if report.selected().contains(id) { " *" } else { "" };
        let kl = l.kl.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "{:>4}  {:<16} {:>14.6}  {:>12}{mark}", i + 1, id, l.std, kl);
    }
    match suggested_k {
        Some(k) => {
            let _ = writeln!(s, "suggestion only (largest relative gap in sorted stds): k = {k}");
        }
        None => {
            let _ = writeln!(s, "suggestion only: no knee found (fewer than two non-zero stds)");
        }
    }
    s
}

#[derive(Clone, Debug, Serialize)]
struct ResultMetrics<'a> {
    final_accuracy_clean: f64,
    final_accuracy_noisy: f64,
    per_epoch_loss: &'a [f64],
    grad_update_count: &'a BTreeMap<String, u64>,
    work: saft_core::trainer::WorkSummary,
}

pub struct TrainOutput {
    pub mode: TrainMode,
    pub result: TrainResult,
    pub plan: FreezePlan,
    pub report: Option<SensitivityReport>,
    pub sensitivity_ms: u64,
    pub model: ModelGraph,
    pub result_path: PathBuf,
}

pub fn cmd_train(cfg: &ExperimentConfig, mode: TrainMode) -> Result<TrainOutput> {
    let k = match mode {
        TrainMode::Saft => Some(require_k(cfg)?),
        _ => None,
    };
    let Prepared {
        data, mut model, ..
    } = prepare(cfg)?;
    let spec = cfg.noise_spec()?;
    let train_cfg = cfg.train_config();

    let mut report = None;
    let mut sensitivity_ms = 0;
    let (result, plan) = match mode {
        TrainMode::Full => {
            let plan = FreezePlan::all_trainable(&model);
            (noise_injection_train(&mut model, &spec, &plan, &train_cfg, &data)?, plan)
        }
        TrainMode::Clean => {
            let plan = FreezePlan::all_trainable(&model);
            (train_clean(&mut model, &train_cfg, &data, Some(&spec))?, plan)
        }
        TrainMode::Saft => {
            let start = Instant::now();
            let mut r = analyse(cfg, &model, &data, &spec, false)?;
            let plan = select_top_k(&mut r, k.expect("saft mode has k"))?;
            sensitivity_ms = start.elapsed().as_millis() as u64;
            write_out(cfg, REPORT_CSV, r.to_csv_string()?.as_bytes())?;
            report = Some(r);
            (noise_injection_train(&mut model, &spec, &plan, &train_cfg, &data)?, plan)
        }
    };

    let doc = json!({
        "mode": mode.name(),
        "noise": spec,
        "k": k,
        "trainable": plan.trainable(),
        "frozen_param_fraction": plan.frozen_param_fraction(&model),
        "metrics": ResultMetrics {
            final_accuracy_clean: result.final_accuracy_clean,
            final_accuracy_noisy: result.final_accuracy_noisy,
            per_epoch_loss: &result.per_epoch_loss,
            grad_update_count: &result.grad_update_count,
            work: result.work,
        },
        "timings": {
            "wall_time_ms": result.wall_time_ms,
            "epoch_wall_time_ms": result.epoch_wall_time_ms,
            "sensitivity_ms": sensitivity_ms,
        },
    });
    let result_path = write_out(cfg, RESULT_JSON, (serde_json::to_string_pretty(&doc)? + "\n").as_bytes())?;

    let mut lines = Vec::new();
    for (epoch, loss) in result.per_epoch_loss.iter().enumerate() {
        let line = json!({
            "epoch": epoch + 1,
            "loss": loss,
            "wall_time_ms": result.epoch_wall_time_ms.get(epoch),
        });
        writeln!(lines, "{line}").expect("writing to a Vec cannot fail");
    }
    write_out(cfg, METRICS_JSONL, &lines)?;
    model.write_checkpoint(out_path(cfg, CHECKPOINT)?)?;

    Ok(TrainOutput {
        mode,
        result,
        plan,
        report,
        sensitivity_ms,
        model,
        result_path,
    })
}

#[derive(Clone, Debug)]
pub struct CompareRow {
    pub spec: NoiseSpec,
    pub untrained: f64,
    pub noise_inj: f64,
    pub saft: f64,
    pub k: usize,
    pub trainable: Vec<String>,
    pub frozen_param_fraction: f64,
    pub full_macs: u64,
    pub saft_macs: u64,
    /// Wall-clock seconds of full training.
    pub full_secs: f64,
    /// Wall-clock seconds of SAFT, sensitivity analysis included.
    pub saft_secs: f64,
    pub sensitivity_secs: f64,
    pub full: TrainResult,
    pub saft_result: TrainResult,
    pub report: SensitivityReport,
}

impl CompareRow {
    pub fn speedup_wall(&self) -> f64 {
        self.full_secs / self.saft_secs
    }

    pub fn speedup_work(&self) -> f64 {
        self.full_macs as f64 / self.saft_macs as f64
    }
}

pub struct CompareOutput {
    pub clean_accuracy: f64,
    pub rows: Vec<CompareRow>,
    pub csv_path: PathBuf,
}

/// Untrained noisy accuracy, full noise-injection training and SAFT, per noise variant.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<CompareOutput> {
    let k = require_k(cfg)?;
    let variants = cfg.compare_variants()?;
    let p = prepare(cfg)?;
    let train_cfg = cfg.train_config();
    let clean_accuracy = evaluate(&p.model, &p.data.test, None, train_cfg.eval_seed)?;

    let mut rows = Vec::with_capacity(variants.len());
    for spec in variants {
        let untrained = evaluate(&p.model, &p.data.test, Some(&spec), train_cfg.eval_seed)?;

        let mut full_model = p.model.clone();
        let plan = FreezePlan::all_trainable(&full_model);
        let start = Instant::now();
        let full = noise_injection_train(&mut full_model, &spec, &plan, &train_cfg, &p.data)?;
        let full_secs = start.elapsed().as_secs_f64();

        let mut saft_model = p.model.clone();
        let start = Instant::now();
        let mut report = analyse(cfg, &saft_model, &p.data, &spec, false)?;
        let plan = select_top_k(&mut report, k)?;
        let sensitivity_secs = start.elapsed().as_secs_f64();
        let saft_result = noise_injection_train(&mut saft_model, &spec, &plan, &train_cfg, &p.data)?;
        let saft_secs = start.elapsed().as_secs_f64();

        rows.push(CompareRow {
            spec,
            untrained,
            noise_inj: full.final_accuracy_noisy,
            saft: saft_result.final_accuracy_noisy,
            k,
            trainable: plan.trainable().iter().cloned().collect(),
            frozen_param_fraction: plan.frozen_param_fraction(&saft_model),
            full_macs: full.work.total_macs(),
            saft_macs: saft_result.work.total_macs(),
            full_secs,
            saft_secs,
            sensitivity_secs,
            full,
            saft_result,
            report,
        });
    }

    let csv_path = write_out(cfg, COMPARISON_CSV, &comparison_csv(clean_accuracy, &rows)?)?;
    write_out(cfg, COMPARISON_TXT, render_comparison(clean_accuracy, &rows).as_bytes())?;
    let mut timings = Vec::new();
    for r in &rows {
        let line = json!({
            "distribution": r.spec.distribution.name(),
            "mode": r.spec.mode.name(),
            "param": r.spec.distribution.param(),
            "full_secs": r.full_secs,
            "saft_secs": r.saft_secs,
            "sensitivity_secs": r.sensitivity_secs,
            "speedup_wall": r.speedup_wall(),
        });
        writeln!(timings, "{line}").expect("writing to a Vec cannot fail");
    }
    write_out(cfg, TIMINGS_JSONL, &timings)?;
    Ok(CompareOutput {
        clean_accuracy,
        rows,
        csv_path,
    })
}

/// Only deterministic columns; wall-clock ratios go to the text table and timings file.
fn comparison_csv(clean: f64, rows: &[CompareRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "distribution",
        "mode",
        "param",
        "clean",
        "untrained",
        "noise_inj",
        "saft",
        "k",
        "trainable",
        "frozen_param_fraction",
        "full_macs",
        "saft_macs",
        "speedup_work",
    ])?;
    for r in rows {
        w.write_record([
            r.spec.distribution.name().to_string(),
            r.spec.mode.name().to_string(),
            r.spec.distribution.param().to_string(),
            clean.to_string(),
            r.untrained.to_string(),
            r.noise_inj.to_string(),
            r.saft.to_string(),
            r.k.to_string(),
            r.trainable.join(";"),
            r.frozen_param_fraction.to_string(),
            r.full_macs.to_string(),
            r.saft_macs.to_string(),
            r.speedup_work().to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))
}

pub fn render_comparison(clean: f64, rows: &[CompareRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "clean accuracy: {:.2}%", clean * 100.0);
    let _ = writeln!(
        s,
        "{:<10} {:<15} {:>8} {:>10} {:>10} {:>8} {:>8} {:>8}",
        "noise", "mode", "param", "untrained", "noise-inj", "saft", "speed", "work"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:<15} {:>8} {:>9.2}% {:>9.2}% {:>7.2}% {:>7.2}x {:>7.2}x",
            r.spec.distribution.name(),
            r.spec.mode.name(),
            r.spec.distribution.param(),
            r.untrained * 100.0,
            r.noise_inj * 100.0,
            r.saft * 100.0,
            r.speedup_wall(),
            r.speedup_work()
        );
    }
    let _ = writeln!(
        s,
        "speed = wall-clock full / SAFT (SAFT includes its sensitivity pass); work = MAC ratio"
    );
    s
}

pub struct OracleOutput {
    pub report: SensitivityReport,
    pub oracle: OracleReport,
    pub rho_std: Option<f64>,
    pub rho_kl: Option<f64>,
    /// `None` when no layer degrades accuracy.
    pub oracle_top: Option<String>,
    pub top_in_std_top_n: bool,
    pub sample_rows: usize,
    pub eval_rows: usize,
    /// Model work for the std analysis alone.
    pub sensitivity_work: WorkCount,
    pub oracle_work: WorkCount,
    pub csv_path: PathBuf,
}

fn eligible_only(scores: &BTreeMap<String, f64>, keep: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    scores
        .iter()
        .filter(|(k, _)| keep.contains_key(*k))
        .map(|(k, v)| (k.clone(), *v))
        .collect()
}

/// Descending order, ties to the earlier layer; 1-based.
fn ranks_by(ids_in_layer_order: &[String], scores: &BTreeMap<String, f64>) -> BTreeMap<String, usize> {
    let mut order: Vec<(usize, &String)> = ids_in_layer_order.iter().enumerate().collect();
    order.sort_by(|a, b| scores[b.1].total_cmp(&scores[a.1]).then(a.0.cmp(&b.0)));
    order.iter().enumerate().map(|(r, (_, id))| ((*id).clone(), r + 1)).collect()
}

fn rho_value(rho: Option<f64>) -> Value {
    rho.map(Value::from).unwrap_or_else(|| Value::from("n/a"))
}

fn rho_text(rho: Option<f64>) -> String {
    rho.map(|r| format!("{r:.4}")).unwrap_or_else(|| "n/a".into())
}

/// Brute-force per-layer accuracy drops next to the std and KL scores.
pub fn cmd_oracle(cfg: &ExperimentConfig) -> Result<OracleOutput> {
    let p = prepare(cfg)?;
    let spec = cfg.noise_spec()?;
    let eval_seed = cfg.train_config().eval_seed;
    let sample = sample_rows(cfg, &p.data)?;

    p.model.reset_work();
    let mut report = analyse(cfg, &p.model, &p.data, &spec, false)?;
    let sensitivity_work = p.model.work();
    {
        let view = NoisyModel::new(&p.model, spec)?;
        let bins = cfg
            .sensitivity
            .kl_bins
            .unwrap_or(saft_core::sensitivity::DEFAULT_KL_BINS);
        report.set_kl(&kl_sensitivity(&p.model, &view, sample.inputs(), bins)?);
    }

    p.model.reset_work();
    let oracle = brute_force_oracle(&p.model, &spec.with_seed(eval_seed), &p.data.test, OracleMetric::Accuracy)?;
    let oracle_work = p.model.work();

    let drops = oracle.drop_scores();
    let std = eligible_only(&report.std_scores(), &drops);
    let kl: BTreeMap<String, f64> = report
        .layers()
        .iter()
        .filter(|l| drops.contains_key(&l.id))
        .map(|l| (l.id.clone(), l.kl.unwrap_or(0.0)))
        .collect();
    let (rho_std, rho_kl) = if drops.len() >= 2 {
        (rank_agreement(&std, &drops)?, rank_agreement(&kl, &drops)?)
    } else {
        (None, None)
    };
    let oracle_top = match oracle.drops.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max) {
        m if m > 0.0 => oracle.top_layer().map(str::to_string),
        _ => None,
    };
    let top_in_std_top_n = oracle_top
        .as_ref()
        .is_some_and(|t| report.ranking().iter().take(AGREEMENT_TOP_N).any(|id| id == t));

    let ids: Vec<String> = oracle.drops.iter().map(|d| d.0.clone()).collect();
    let std_rank = ranks_by(&ids, &std);
    let kl_rank = ranks_by(&ids, &kl);
    let oracle_rank = ranks_by(&ids, &drops);

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "layer_id",
        "layer_index",
        "kind",
        "std",
        "kl",
        "oracle_drop",
        "std_rank",
        "kl_rank",
        "oracle_rank",
    ])?;
    for id in &ids {
        let l = report.get(id).expect("oracle layers are model layers");
        w.write_record([
            id.clone(),
            l.index.to_string(),
            l.kind.clone(),
            l.std.to_string(),
            kl[id].to_string(),
            drops[id].to_string(),
            std_rank[id].to_string(),
            kl_rank[id].to_string(),
            oracle_rank[id].to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))?;
    let csv_path = write_out(cfg, ORACLE_CSV, &bytes)?;

    let summary = json!({
        "metric": "accuracy",
        "baseline_accuracy": oracle.baseline,
        "eval_rows": p.data.test.len(),
        "sample_rows": sample.len(),
        "rho_std_oracle": rho_value(rho_std),
        "rho_kl_oracle": rho_value(rho_kl),
        "oracle_top_layer": oracle_top,
        "std_top_n": AGREEMENT_TOP_N,
        "oracle_top_in_std_top_n": top_in_std_top_n,
        "std_ranking": report.ranking(),
        "oracle_noisy_evaluations": oracle.noisy_evaluations,
        "sensitivity_forward_rows": sensitivity_work.forward_rows,
        "sensitivity_layer_rows": sensitivity_work.layer_rows,
        "oracle_forward_rows": oracle_work.forward_rows,
    });
    write_out(cfg, AGREEMENT_JSON, (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
    let text = format!(
        "spearman rho (std vs oracle): {}\nspearman rho (kl vs oracle):  {}\noracle top layer: {}\nin std top-{AGREEMENT_TOP_N}: {}\ncost: sensitivity {} model-pass rows over {} samples; oracle {} model-pass rows over {} samples ({} noisy evaluations)\n",
        rho_text(rho_std),
        rho_text(rho_kl),
        oracle_top.as_deref().unwrap_or("n/a (no layer degrades accuracy)"),
        top_in_std_top_n,
        sensitivity_work.forward_rows,
        sample.len(),
        oracle_work.forward_rows,
        p.data.test.len(),
        oracle.noisy_evaluations,
    );
    write_out(cfg, AGREEMENT_TXT, text.as_bytes())?;

    Ok(OracleOutput {
        report,
        oracle,
        rho_std,
        rho_kl,
        oracle_top,
        top_in_std_top_n,
        sample_rows: sample.len(),
        eval_rows: p.data.test.len(),
        sensitivity_work,
        oracle_work,
        csv_path,
    })
}

/// Output directory contents, for the CLI summary.
pub fn listing(dir: &Path, names: &[&str]) -> String {
    names
        .iter()
        .map(|n| dir.join(n).display().to_string())
        .collect::<Vec<_>>()
        .join("\n")
}
