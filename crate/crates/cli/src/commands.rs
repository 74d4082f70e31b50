//! Subcommand bodies. Each returns the process exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use freezetune::autograd::gradcheck::{corrupted_layer_norm_check, run_suite, standard_checks};
use freezetune::data::Dataset;
use freezetune::memory::{
    account_iteration, imbalance_byte_ratio, imbalance_ratio, state_memory, worst_case_decision,
};
use freezetune::model::{HeadPolicy, LayerRegistry};
use freezetune::train::{evaluate, fine_tune, pretrain_synthetic, Metrics, RunLog, TrainConfig};
use freezetune::{CodecConfig, FreezeDecision, Model, SchedulerKind};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::RunFile;

/// Seed of the finite-difference suite.
const GRADCHECK_SEED: u64 = 0x6c_ec;

#[derive(Debug, Serialize)]
struct PretrainSummary {
    steps: usize,
    task: String,
    num_classes: usize,
    final_loss: Option<f64>,
}

/// Initial model, pretrained on the source task when configured.
fn base_model(run: &RunFile) -> Result<(Model<f32>, Option<PretrainSummary>)> {
    let mut model = Model::new(run.model.clone(), run.train.init_seed)?;
    if run.pretrain.steps == 0 {
        return Ok((model, None));
    }
    let source = run.pretrain_task();
    let data = source.generate().context("[pretrain] task")?;
    let classes = run.model.num_classes;
    if source.num_classes != classes {
        model.reset_classifier(source.num_classes, run.pretrain.seed)?;
    }
    let mut config = TrainConfig {
        batch_size: run.train.batch_size,
        seed: run.pretrain.seed,
        ..TrainConfig::default()
    };
    config.optimizer.lr = run.pretrain.lr;
    let log = pretrain_synthetic(&mut model, &data.train, run.pretrain.steps, &config)?;
    if source.num_classes != classes {
        model.reset_classifier(classes, run.train.init_seed)?;
    }
    let summary = PretrainSummary {
        steps: run.pretrain.steps,
        task: source.kind.to_string(),
        num_classes: source.num_classes,
        final_loss: log.and_then(|l| l.final_loss()),
    };
    Ok((model, Some(summary)))
}

fn peak_cached(log: &RunLog) -> u64 {
    log.iterations
        .iter()
        .map(|i| i.cached.total())
        .max()
        .unwrap_or(0)
}

fn peak_analytic(log: &RunLog) -> u64 {
    log.iterations
        .iter()
        .map(|i| i.analytic_bytes)
        .max()
        .unwrap_or(0)
}

/// Fine-tunes a copy of `base` and writes the run's CSVs into `dir`.
fn fine_tune_into(
    base: &Model<f32>,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    dir: &Path,
) -> Result<(RunLog, Metrics)> {
    let mut model = base.clone();
    let log = fine_tune(&mut model, train, Some(val), config)?;
    let metrics = evaluate(&model, val, config.batch_size)?;
    log.write_csvs(dir)
        .with_context(|| format!("cannot write run CSVs to {}", dir.display()))?;
    Ok((log, metrics))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn prepare_dir(run: &RunFile) -> Result<&Path> {
    let dir = run.output.dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    fs::write(dir.join("config.resolved.toml"), run.to_toml()?)?;
    Ok(dir)
}

/// `train`: one fine-tuning run.
pub fn train(run: &RunFile) -> Result<ExitCode> {
    run.validate()?;
    let splits = run.task.generate().context("[task]")?;
    let (base, pretrain) = base_model(run)?;
    let dir = prepare_dir(run)?;
    let config = run.train.to_train_config();
    let (log, metrics) = fine_tune_into(&base, &splits.train, &splits.val, &config, dir)?;

    let summary = json!({
        "scheduler": config.scheduler.as_str(),
        "freeze_rate": config.freeze_rate,
        "iterations": log.iterations.len(),
        "parameters": run.model.parameter_count(),
        "schedulable_layers": base.schedulable_layers().len(),
        // the model has a single token-type row
        "token_type_rows": 1,
        "initial_loss": log.initial_loss(),
        "final_train_loss": log.final_loss(),
        "val_loss": metrics.loss,
        "val_accuracy": metrics.accuracy,
        "evals": log.evals,
        "peak_cached_bytes": peak_cached(&log),
        "peak_analytic_bytes": peak_analytic(&log),
        "update_counts": log.layer_names.iter().zip(&log.update_counts)
            .map(|(n, c)| (n.clone(), *c)).collect::<std::collections::BTreeMap<_, _>>(),
        "pretrain": pretrain,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "{} F={} iterations={} val_accuracy={:.4} val_loss={:.4} peak_cached_bytes={}",
        config.scheduler,
        config.freeze_rate,
        log.iterations.len(),
        metrics.accuracy,
        metrics.loss,
        peak_cached(&log)
    );
    println!("wrote {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    scheduler: SchedulerKind,
    freeze_rate: f64,
    final_accuracy: f64,
    final_loss: f64,
    peak_cached_bytes: u64,
}

/// `sweep`: every scheduler at every rate, in parallel, from one base model.
/// All runs share the configured seed.
pub fn sweep(run: &RunFile, rates: Option<Vec<f64>>) -> Result<ExitCode> {
    run.validate()?;
    let rates = rates.unwrap_or_else(|| run.sweep.freeze_rates.clone());
    anyhow::ensure!(!rates.is_empty(), "sweep needs at least one freezing rate");
    anyhow::ensure!(
        !run.sweep.schedulers.is_empty(),
        "sweep needs at least one scheduler"
    );
    let splits = run.task.generate().context("[task]")?;
    let (base, _) = base_model(run)?;
    let dir = prepare_dir(run)?;

    let plan: Vec<(SchedulerKind, f64)> = run
        .sweep
        .schedulers
        .iter()
        .flat_map(|&s| rates.iter().map(move |&r| (s, r)))
        .collect();
    let rows: Vec<SweepRow> = plan
        .par_iter()
        .map(|&(scheduler, freeze_rate)| {
            let config = TrainConfig {
                scheduler,
                freeze_rate,
                ..run.train.to_train_config()
            };
            config.validate()?;
            let sub = dir.join(format!("{scheduler}_{freeze_rate}"));
            let (log, metrics) = fine_tune_into(&base, &splits.train, &splits.val, &config, &sub)?;
            Ok(SweepRow {
                scheduler,
                freeze_rate,
                final_accuracy: metrics.accuracy,
                final_loss: metrics.loss,
                peak_cached_bytes: peak_cached(&log),
            })
        })
        .collect::<Result<_>>()?;

    let mut csv =
        String::from("scheduler,freeze_rate,final_accuracy,final_loss,peak_cached_bytes\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.scheduler, r.freeze_rate, r.final_accuracy, r.final_loss, r.peak_cached_bytes
        )?;
    }
    fs::write(dir.join("sweep.csv"), &csv)?;
    print!("{csv}");
    println!("wrote {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

/// `memory-report`: analytic footprint of the configured model, baseline
/// against the worst-case decision at the configured rate with codecs.
pub fn memory_report(run: &RunFile) -> Result<ExitCode> {
    let config = &run.model;
    config.validate().context("[model]")?;
    let mem = &run.memory;
    let seq_len = mem.seq_len.unwrap_or(config.max_seq_len);
    anyhow::ensure!(
        seq_len >= 1 && seq_len <= config.max_seq_len,
        "[memory] seq_len {seq_len} must be in 1..={}",
        config.max_seq_len
    );
    anyhow::ensure!(!mem.batch_sizes.is_empty(), "[memory] batch_sizes is empty");
    let codecs = mem.codecs();
    let registry = LayerRegistry::new(config);
    let candidates: Vec<usize> = registry
        .entries()
        .iter()
        .filter(|e| config.head_policy == HeadPolicy::Scheduled || !e.role.is_head())
        .map(|e| e.id)
        .collect();
    let n = config.num_layers();

    let mut batches = Vec::new();
    let mut records = None;
    for &batch in &mem.batch_sizes {
        anyhow::ensure!(batch >= 1, "[memory] batch sizes must be >= 1");
        let base = account_iteration(
            config,
            batch,
            seq_len,
            &FreezeDecision::none(0, n),
            &CodecConfig::off(),
        );
        let decision = worst_case_decision(
            config,
            batch,
            seq_len,
            mem.freeze_rate,
            &candidates,
            &codecs,
        )?;
        let slim = account_iteration(config, batch, seq_len, &decision, &codecs);
        println!(
            "batch {batch:>4}: baseline {:.3} GB -> {:.3} GB at F={} ({:.2}x)",
            base.total_gb(),
            slim.total_gb(),
            mem.freeze_rate,
            base.total_bytes as f64 / slim.total_bytes as f64
        );
        batches.push(json!({
            "batch": batch,
            "baseline_bytes": base.total_bytes,
            "baseline_gb": base.total_gb(),
            "compressed_bytes": slim.total_bytes,
            "compressed_gb": slim.total_gb(),
            "frozen_layers": slim.frozen_layers,
            "reduction": base.total_bytes as f64 / slim.total_bytes as f64,
        }));
        if records.is_none() {
            let per_layer: Vec<_> = registry
                .entries()
                .iter()
                .map(|e| {
                    json!({
                        "layer": e.name,
                        "baseline_bytes": base.per_layer().get(&e.id).copied().unwrap_or(0),
                        "compressed_bytes": slim.per_layer().get(&e.id).copied().unwrap_or(0),
                        "frozen": decision.is_frozen(e.id),
                    })
                })
                .collect();
            records = Some(json!({ "batch": batch, "layers": per_layer, "records": slim.records }));
        }
    }

    let report = json!({
        "seq_len": seq_len,
        "freeze_rate": mem.freeze_rate,
        "quant": mem.quant,
        "prune": mem.prune,
        "imbalance_ratio": imbalance_ratio(config),
        "imbalance_byte_ratio": imbalance_byte_ratio(config, &codecs),
        "state": state_memory(config),
        "batches": batches,
        "detail": records,
    });
    let dir = prepare_dir(run)?;
    write_json(&dir.join("memory_report.json"), &report)?;
    println!("wrote {}", dir.join("memory_report.json").display());
    Ok(ExitCode::SUCCESS)
}

/// `gradcheck`: exits with failure when any op exceeds the tolerance.
pub fn gradcheck(instances: usize, with_corrupted_fixture: bool) -> Result<ExitCode> {
    anyhow::ensure!(instances >= 1, "--instances must be >= 1");
    let mut checks = standard_checks();
    if with_corrupted_fixture {
        checks.push(corrupted_layer_norm_check());
    }
    let reports = run_suite(&checks, instances, GRADCHECK_SEED)?;
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        if !r.passed() {
            failed += 1;
        }
        println!(
            "{:<28} {:>3} instances  max rel err {:.3e}  {verdict}",
            r.name, r.instances, r.max_rel_err
        );
    }
    if failed > 0 {
        eprintln!("gradcheck: {failed} of {} ops failed", reports.len());
        return Ok(ExitCode::FAILURE);
    }
    println!("gradcheck: all {} ops passed", reports.len());
    Ok(ExitCode::SUCCESS)
}

fn dataset_csv(data: &Dataset) -> String {
    let mut out: String = (0..data.seq_len).map(|i| format!("t{i},")).collect();
    out.push_str("label\n");
    for (i, label) in data.labels.iter().enumerate() {
        for t in data.sequence(i) {
            let _ = write!(out, "{t},");
        }
        let _ = writeln!(out, "{label}");
    }
    out
}

/// `gen-data`: the configured task as `train.csv` and `val.csv`.
pub fn gen_data(run: &RunFile) -> Result<ExitCode> {
    let splits = run.task.generate().context("[task]")?;
    let dir = run.output.dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    fs::write(dir.join("train.csv"), dataset_csv(&splits.train))?;
    fs::write(dir.join("val.csv"), dataset_csv(&splits.val))?;
    println!(
        "{}: {} train and {} val rows in {}",
        run.task.kind,
        splits.train.len(),
        splits.val.len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}
