//! Command implementations.

use std::path::{Path, PathBuf};

use cmt_core::dataset::{subject_independent_folds, Dataset, FoldSplit};
use cmt_core::interpret::{export_report, report_for_window, ExportFormat};
use cmt_core::manifest::{load_recording, read_manifest};
use cmt_core::metrics::compute_metrics;
use cmt_core::model::{load_checkpoint, CheckpointModel, EpochCmt, ModelKind, SequenceCmt};
use cmt_core::pipeline::{preprocess_recordings, PreprocessConfig};
use cmt_core::train::{
    aggregate_cv, evaluate_epoch_model, evaluate_sequence_model, run_fold, FoldRunArgs,
};
use cmt_core::{exec, Error, Result};

use crate::config::RunConfig;

fn write_command_config(dir: &Path, value: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut obj = value;
    obj.as_object_mut()
        .expect("command config is an object")
        .insert(
            "artifact.version".into(),
            serde_json::Value::String(cmt_core::VERSION.into()),
        );
    std::fs::write(
        dir.join("effective_config.json"),
        serde_json::to_string_pretty(&obj)? + "\n",
    )?;
    Ok(())
}

fn resolve_data_dir(flag: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    std::env::var_os("CMT_DATA_DIR")
        .map(PathBuf::from)
        .ok_or_else(|| Error::Input("no dataset directory (--data or CMT_DATA_DIR)".into()))
}

pub fn preprocess(
    manifest: &Path,
    out: &Path,
    channels: Option<&str>,
    filter_taps: usize,
    jobs: usize,
) -> Result<()> {
    let mut cfg = PreprocessConfig {
        filter_taps,
        ..PreprocessConfig::default()
    };
    if let Some(list) = channels {
        cfg.channels = list.split(',').map(|s| s.trim().to_string()).collect();
        if cfg.channels.iter().any(String::is_empty) {
            return Err(Error::Config("empty channel name in --channels".into()));
        }
    }
    write_command_config(
        out,
        serde_json::json!({
            "command": "preprocess",
            "manifest": manifest.display().to_string(),
            "out": out.display().to_string(),
            "channels": cfg.channels,
            "fs": cfg.fs,
            "band_hz": [cfg.low_hz, cfg.high_hz],
            "filter_taps": cfg.filter_taps,
            "wake_margin_epochs": cfg.wake_margin_epochs,
            "jobs": jobs,
        }),
    )?;

    let (entries, base) = read_manifest(manifest)?;
    let mut recordings = Vec::new();
    let mut load_failures: Vec<(String, String)> = Vec::new();
    for entry in &entries {
        match load_recording(entry, &base) {
            Ok(r) => recordings.push(r),
            Err(e) => {
                log::warn!(
                    "event=recording_load_failed recording={} reason=\"{e}\"",
                    entry.effective_id()
                );
                load_failures.push((entry.effective_id().to_string(), e.to_string()));
            }
        }
    }
    if recordings.is_empty() {
        return Err(Error::Input("no recording in the manifest could be loaded".into()));
    }
    let outcome = exec::with_threads(jobs, || preprocess_recordings(&recordings, &cfg))?;
    outcome.dataset.write(out)?;

    let counts = outcome.dataset.class_counts();
    let summary = serde_json::json!({
        "recordings_processed": outcome.dataset.recordings.len(),
        "recordings_failed": outcome.failures.len() + load_failures.len(),
        "failures": outcome.failures.iter().chain(&load_failures)
            .map(|(id, e)| serde_json::json!({"recording": id, "reason": e}))
            .collect::<Vec<_>>(),
        "epochs_total": outcome.dataset.total_epochs(),
        "epochs_discarded": outcome.dataset.recordings.iter().map(|r| r.discarded).sum::<usize>(),
        "class_counts": {
            "W": counts[0], "N1": counts[1], "N2": counts[2], "N3": counts[3], "REM": counts[4]
        },
    });
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    log::info!(
        "event=preprocess_done recordings={} epochs={}",
        outcome.dataset.recordings.len(),
        outcome.dataset.total_epochs()
    );
    Ok(())
}

pub fn split(data: Option<&Path>, out: &Path, k: usize, seed: u64) -> Result<()> {
    let data_dir = resolve_data_dir(data)?;
    let dataset = Dataset::read(&data_dir)?;
    let split = subject_independent_folds(&dataset.subjects(), k, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
        write_command_config(
            parent,
            serde_json::json!({
                "command": "split",
                "data": data_dir.display().to_string(),
                "out": out.display().to_string(),
                "k": k,
                "seed": seed,
            }),
        )?;
    }
    split.write(out)?;
    log::info!("event=split_done subjects={} k={k} seed={seed}", split.assignments.len());
    Ok(())
}

pub fn train(
    config_path: Option<&Path>,
    overrides: &[(String, String)],
    fold: Option<usize>,
    all: bool,
    out: Option<&Path>,
    resume: bool,
) -> Result<()> {
    let cfg = RunConfig::load(config_path, overrides)?;
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory (--out or run.out_dir)".into()))?;
    let data_dir = cfg
        .data_dir
        .clone()
        .ok_or_else(|| Error::Config("no dataset directory (data.dir or CMT_DATA_DIR)".into()))?;
    let folds_path = cfg
        .folds_path
        .clone()
        .ok_or_else(|| Error::Config("no fold split (data.folds)".into()))?;
    cfg.write_effective(&out_dir)?;

    let dataset = Dataset::read(&data_dir)?;
    let folds = FoldSplit::read(&folds_path)?;
    // Catch configuration/dataset mismatches before any training work.
    cmt_core::train::channel_indices(&dataset, &cfg.model.modalities)?;

    let selected: Vec<usize> = if all {
        (0..folds.k).collect()
    } else {
        vec![fold.ok_or_else(|| Error::Config("pass --fold <k> or --all".into()))?]
    };

    let results = exec::with_threads(cfg.jobs, || -> Result<Vec<_>> {
        let mut results = Vec::new();
        for &f in &selected {
            let run_dir = out_dir.join(format!("fold{f}"));
            let result = run_fold(FoldRunArgs {
                dataset: &dataset,
                folds: &folds,
                fold: f,
                kind: cfg.kind,
                model_config: &cfg.model,
                train_config: &cfg.train,
                run_dir: &run_dir,
                resume,
            })?;
            log::info!(
                "event=fold_done fold={f} acc={:.4} kappa={:.4} best_epoch={}",
                result.metrics.acc,
                result.metrics.kappa,
                result.best_epoch
            );
            results.push(result);
        }
        Ok(results)
    })?;

    if all {
        let per_fold: Vec<_> = results
            .iter()
            .map(|r| (r.fold, r.confusion.clone()))
            .collect();
        let (pooled, metrics) = aggregate_cv(&per_fold, folds.k)?;
        pooled.write_csv(out_dir.join("pooled_confusion.csv"))?;
        metrics.write_json(out_dir.join("pooled_metrics.json"))?;
        println!("{}", metrics.to_json());
    } else if let Some(r) = results.first() {
        println!("{}", r.metrics.to_json());
    }
    Ok(())
}

pub fn evaluate(
    checkpoint: &Path,
    data: Option<&Path>,
    folds: Option<&Path>,
    fold: Option<usize>,
    out: &Path,
) -> Result<()> {
    let data_dir = resolve_data_dir(data)?;
    let dataset = Dataset::read(&data_dir)?;
    let model = load_checkpoint::<f32>(checkpoint)?;
    write_command_config(
        out,
        serde_json::json!({
            "command": "evaluate",
            "checkpoint": checkpoint.display().to_string(),
            "data": data_dir.display().to_string(),
            "fold": fold,
            "model.kind": model.kind().to_string(),
            "model": serde_json::to_value(model.config())?,
        }),
    )?;

    let rec_indices: Vec<usize> = match (folds, fold) {
        (Some(folds_path), Some(fold)) => {
            let split = FoldSplit::read(folds_path)?;
            dataset
                .recordings
                .iter()
                .enumerate()
                .filter(|(_, r)| split.fold_of(&r.subject_id) == Some(fold))
                .map(|(i, _)| i)
                .collect()
        }
        _ => (0..dataset.recordings.len()).collect(),
    };
    if rec_indices.is_empty() {
        return Err(Error::Input("no recordings selected for evaluation".into()));
    }

    let (cm, skipped) = match &model {
        CheckpointModel::Epoch(m) => (evaluate_epoch_model(m, &dataset, &rec_indices, 32)?, 0),
        CheckpointModel::Sequence(m) => evaluate_sequence_model(m, &dataset, &rec_indices)?,
    };
    let metrics = compute_metrics(&cm)?;
    cm.write_csv(out.join("confusion.csv"))?;
    metrics.write_json(out.join("metrics.json"))?;
    println!("{}", metrics.to_json());
    log::info!(
        "event=evaluate_done epochs={} skipped={} acc={:.4}",
        cm.total(),
        skipped,
        metrics.acc
    );
    Ok(())
}

pub fn interpret(
    checkpoint: &Path,
    data: Option<&Path>,
    sequences: &str,
    format: &str,
    out: &Path,
) -> Result<()> {
    let format: ExportFormat = format.parse()?;
    let data_dir = resolve_data_dir(data)?;
    let dataset = Dataset::read(&data_dir)?;
    let model = match load_checkpoint::<f32>(checkpoint)? {
        CheckpointModel::Sequence(m) => m,
        CheckpointModel::Epoch(_) => {
            return Err(Error::Usage(
                "inter-epoch reports need a sequence-model checkpoint; this is an epoch model"
                    .into(),
            ))
        }
    };
    write_command_config(
        out,
        serde_json::json!({
            "command": "interpret",
            "checkpoint": checkpoint.display().to_string(),
            "data": data_dir.display().to_string(),
            "sequences": sequences,
            "format": format!("{format:?}").to_lowercase(),
        }),
    )?;

    let mut written = Vec::new();
    for spec in sequences.split(',') {
        let (rec_id, start) = spec
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::Input(format!("bad sequence id '{spec}' (want <rec>:<start>)")))?;
        let start: usize = start
            .parse()
            .map_err(|_| Error::Input(format!("bad start offset in '{spec}'")))?;
        let recording = dataset
            .recordings
            .iter()
            .position(|r| r.recording_id == rec_id)
            .ok_or_else(|| Error::Input(format!("recording '{rec_id}' not in dataset")))?;
        let bundle = report_for_window(&model, &dataset, recording, start)?;
        written.extend(export_report(&bundle, format, out)?);
    }
    for path in &written {
        println!("{}", path.display());
    }
    log::info!("event=interpret_done files={}", written.len());
    Ok(())
}

pub fn param_count(config_path: Option<&Path>, overrides: &[(String, String)]) -> Result<()> {
    let cfg = RunConfig::load(config_path, overrides)?;
    let count = match cfg.kind {
        ModelKind::Epoch => EpochCmt::<f32>::new(&cfg.model, 0)?.param_count(),
        ModelKind::Sequence => SequenceCmt::<f32>::new(&cfg.model, 0)?.param_count(),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "kind": cfg.kind.to_string(),
            "param_count": count,
            "embed_dim": cfg.model.embed_dim,
            "ff_dim": cfg.model.ff_dim,
            "modalities": cfg.model.modalities,
            "seq_len": cfg.model.seq_len,
            "artifact.version": cmt_core::VERSION,
        }))?
    );
    Ok(())
}

pub fn gradcheck(seed: u64, repeats: usize, step: f64, tolerance: f64) -> Result<()> {
    let report = cmt_core::gradcheck::run_suite(seed, repeats, step, tolerance)?;
    cmt_core::gradcheck::verify_coverage(&report)?;
    for op in &report.ops {
        println!(
            "op={} max_rel_err={:.3e} coords={} status={}",
            op.name,
            op.max_rel_err,
            op.checked_coords,
            if op.passed { "pass" } else { "fail" }
        );
    }
    if report.all_passed() {
        println!("gradcheck: all {} ops within {:.1e}", report.ops.len(), tolerance);
        Ok(())
    } else {
        Err(Error::Internal(format!(
            "gradient check failed for {} op(s)",
            report.ops.iter().filter(|o| !o.passed).count()
        )))
    }
}
