//! Training: weighted cross-entropy batches, Adam updates, per-fold runs
//! with best-validation checkpoint selection, resumable state, and pooled
//! cross-validation aggregation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::dataset::{build_sequences, Dataset, FoldSplit, SequenceMode, SequenceRef};
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::{compute_metrics, ConfusionMatrix, Metrics};
use crate::model::{
    predict_averaged, save_checkpoint, CheckpointModel, EpochCmt, EpochSignal, ModelConfig,
    ModelKind, SequenceCmt,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Loss weights over (W, N1, N2, N3, REM).
    pub class_weights: [f64; 5],
    pub max_epochs: usize,
    pub seed: u64,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 32,
            class_weights: [1.0, 2.0, 1.0, 2.0, 2.0],
            max_epochs: 5,
            seed: 7,
            folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.class_weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::Config("class weights must all be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn class_weights_f32(&self) -> [f32; 5] {
        let mut w = [0f32; 5];
        for (o, &v) in w.iter_mut().zip(&self.class_weights) {
            *o = v as f32;
        }
        w
    }
}

/// Map model modalities onto dataset channel indices.
pub fn channel_indices(dataset: &Dataset, modalities: &[String]) -> Result<Vec<usize>> {
    modalities
        .iter()
        .map(|m| {
            dataset
                .channels
                .iter()
                .position(|c| c == m)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "modality '{}' not found in dataset channels {:?}",
                        m, dataset.channels
                    ))
                })
        })
        .collect()
}

fn gather_epoch(
    samples: &[f32],
    n_channels: usize,
    idxs: &[usize],
    epoch_samples: usize,
    out: &mut [f32],
) {
    for t in 0..epoch_samples {
        for (mi, &ci) in idxs.iter().enumerate() {
            out[t * idxs.len() + mi] = samples[t * n_channels + ci];
        }
    }
}

/// Assemble `[B, T, M]` signals and labels for a batch of (recording, epoch)
/// pairs.
pub fn epoch_batch(
    dataset: &Dataset,
    items: &[(usize, usize)],
    idxs: &[usize],
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let t = dataset.epoch_samples;
    let m = idxs.len();
    let c = dataset.channels.len();
    let mut data = vec![0f32; items.len() * t * m];
    let mut labels = Vec::with_capacity(items.len());
    for (bi, &(ri, ei)) in items.iter().enumerate() {
        let epoch = &dataset.recordings[ri].epochs[ei];
        gather_epoch(
            &epoch.samples,
            c,
            idxs,
            t,
            &mut data[bi * t * m..(bi + 1) * t * m],
        );
        labels.push(epoch.label.index());
    }
    Ok((Tensor::new(vec![items.len(), t, m], data)?, labels))
}

/// Assemble `[B, L, T, M]` signals and flattened (sequence-major) labels for
/// a batch of sequence windows.
pub fn sequence_batch(
    dataset: &Dataset,
    refs: &[SequenceRef],
    l: usize,
    idxs: &[usize],
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let t = dataset.epoch_samples;
    let m = idxs.len();
    let c = dataset.channels.len();
    let mut data = vec![0f32; refs.len() * l * t * m];
    let mut labels = Vec::with_capacity(refs.len() * l);
    for (bi, sref) in refs.iter().enumerate() {
        let rec = &dataset.recordings[sref.recording];
        for li in 0..l {
            let epoch = &rec.epochs[sref.start + li];
            let off = (bi * l + li) * t * m;
            gather_epoch(&epoch.samples, c, idxs, t, &mut data[off..off + t * m]);
            labels.push(epoch.label.index());
        }
    }
    Ok((Tensor::new(vec![refs.len(), l, t, m], data)?, labels))
}

fn extract_grads(tape: &Tape<f32>, vars: &[crate::tape::Var]) -> Vec<Option<Vec<f32>>> {
    vars.iter().map(|&v| tape.grad(v).map(<[f32]>::to_vec)).collect()
}

/// One optimizer step of the epoch model on a batch; returns the loss.
pub fn epoch_train_step(
    model: &mut EpochCmt<f32>,
    adam: &mut Adam<f32>,
    signals: &Tensor<f32>,
    labels: &[usize],
    class_weights: &[f32; 5],
) -> Result<f32> {
    let mut tape = Tape::new();
    let (out, vars) = model.forward(&mut tape, signals, true)?;
    let loss = tape.weighted_cross_entropy(out.logits, labels, class_weights)?;
    tape.backward(loss)?;
    let grads = extract_grads(&tape, &vars);
    let loss_value = tape.value(loss).data()[0];
    adam.step(model.params_mut(), &grads);
    model.apply_bn_updates(&out.bn_updates);
    Ok(loss_value)
}

/// One optimizer step of the sequence model on a batch; returns the loss.
pub fn sequence_train_step(
    model: &mut SequenceCmt<f32>,
    adam: &mut Adam<f32>,
    signals: &Tensor<f32>,
    labels: &[usize],
    class_weights: &[f32; 5],
) -> Result<f32> {
    let mut tape = Tape::new();
    let (out, vars) = model.forward(&mut tape, signals, true)?;
    let loss = tape.weighted_cross_entropy(out.logits, labels, class_weights)?;
    tape.backward(loss)?;
    let grads = extract_grads(&tape, &vars);
    let loss_value = tape.value(loss).data()[0];
    adam.step(model.params_mut(), &grads);
    model.apply_bn_updates(&out.bn_updates);
    Ok(loss_value)
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    let _ = probs;
    best
}

/// Direct eval-mode confusion matrix of the epoch model over whole recordings.
pub fn evaluate_epoch_model(
    model: &EpochCmt<f32>,
    dataset: &Dataset,
    rec_indices: &[usize],
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let idxs = channel_indices(dataset, &model.config().modalities)?;
    let per_rec: Vec<Result<ConfusionMatrix>> = exec::map_collect(rec_indices, |&ri| {
        let items: Vec<(usize, usize)> = (0..dataset.recordings[ri].epochs.len())
            .map(|ei| (ri, ei))
            .collect();
        let mut cm = ConfusionMatrix::new();
        for chunk in items.chunks(batch_size.max(1)) {
            let (signals, labels) = epoch_batch(dataset, chunk, &idxs)?;
            let probs = model.predict_probs(&signals)?;
            for (p, &t) in probs.iter().zip(&labels) {
                cm.accumulate(t, argmax(p))?;
            }
        }
        Ok(cm)
    });
    let mut cm = ConfusionMatrix::new();
    for r in per_rec {
        cm.merge(&r?);
    }
    Ok(cm)
}

/// Mean-probability evaluation of the sequence model over whole recordings.
/// Epochs not covered by any full window are skipped and counted.
pub fn evaluate_sequence_model(
    model: &SequenceCmt<f32>,
    dataset: &Dataset,
    rec_indices: &[usize],
) -> Result<(ConfusionMatrix, usize)> {
    let idxs = channel_indices(dataset, &model.config().modalities)?;
    let identity = idxs.iter().copied().eq(0..dataset.channels.len());
    let t = dataset.epoch_samples;
    let c = dataset.channels.len();
    let per_rec: Vec<Result<(ConfusionMatrix, usize)>> = exec::map_collect(rec_indices, |&ri| {
        let rec = &dataset.recordings[ri];
        if rec.epochs.len() < model.config().seq_len {
            log::warn!(
                "event=recording_skipped recording={} epochs={} needed={}",
                rec.recording_id,
                rec.epochs.len(),
                model.config().seq_len
            );
            return Ok((ConfusionMatrix::new(), rec.epochs.len()));
        }
        // Gather model channels when they are a strict subset of the dataset's.
        let gathered: Option<Vec<Vec<f32>>> = if identity {
            None
        } else {
            Some(
                rec.epochs
                    .iter()
                    .map(|e| {
                        let mut buf = vec![0f32; t * idxs.len()];
                        gather_epoch(&e.samples, c, &idxs, t, &mut buf);
                        buf
                    })
                    .collect(),
            )
        };
        let signals: Vec<EpochSignal<'_, f32>> = rec
            .epochs
            .iter()
            .enumerate()
            .map(|(i, e)| EpochSignal {
                orig_index: e.orig_index,
                samples: gathered
                    .as_ref()
                    .map(|g| g[i].as_slice())
                    .unwrap_or(&e.samples),
            })
            .collect();
        let probs = predict_averaged(model, &signals)?;
        let mut cm = ConfusionMatrix::new();
        let mut skipped = 0usize;
        for (epoch, prob) in rec.epochs.iter().zip(&probs) {
            match prob {
                Some(p) => cm.accumulate(epoch.label.index(), argmax(p))?,
                None => skipped += 1,
            }
        }
        Ok((cm, skipped))
    });
    let mut cm = ConfusionMatrix::new();
    let mut skipped = 0usize;
    for r in per_rec {
        let (sub, s) = r?;
        cm.merge(&sub);
        skipped += s;
    }
    Ok((cm, skipped))
}

// ---- resumable fold runs ----

const STATE_MAGIC: &[u8; 8] = b"CMTSTAT1";

#[derive(Serialize, Deserialize)]
struct TrainStateHeader {
    epochs_done: usize,
    steps_done: u64,
    adam_step: u64,
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
    best_epoch: Option<usize>,
    best_acc: f64,
}

fn save_train_state(
    path: &Path,
    header: &TrainStateHeader,
    adam: &Adam<f32>,
) -> Result<()> {
    let bytes = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(STATE_MAGIC)?;
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(&bytes)?;
    let (_, m, v) = adam.state();
    for arr in m.iter().chain(v.iter()) {
        for &x in arr {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn load_train_state(path: &Path, adam: &mut Adam<f32>) -> Result<TrainStateHeader> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != STATE_MAGIC {
        return Err(Error::Checkpoint("bad training-state magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let len = u32::from_le_bytes(b4) as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    let header: TrainStateHeader = serde_json::from_slice(&bytes)?;
    let (_, m0, v0) = adam.state();
    let shapes: Vec<usize> = m0.iter().map(Vec::len).collect();
    let _ = v0;
    let mut read_arrays = |shapes: &[usize]| -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(shapes.len());
        for &n in shapes {
            let mut arr = vec![0f32; n];
            for slot in arr.iter_mut() {
                r.read_exact(&mut b4)?;
                *slot = f32::from_le_bytes(b4);
            }
            out.push(arr);
        }
        Ok(out)
    };
    let m = read_arrays(&shapes)?;
    let v = read_arrays(&shapes)?;
    adam.restore(header.adam_step, m, v);
    Ok(header)
}

pub struct FoldRunArgs<'a> {
    pub dataset: &'a Dataset,
    pub folds: &'a FoldSplit,
    pub fold: usize,
    pub kind: ModelKind,
    pub model_config: &'a ModelConfig,
    pub train_config: &'a TrainConfig,
    pub run_dir: &'a Path,
    /// Continue from `state.bin`/`last.ckpt` in `run_dir` when present.
    pub resume: bool,
}

pub struct FoldResult {
    pub fold: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
    pub steps: u64,
}

enum FoldModel {
    Epoch(EpochCmt<f32>),
    Sequence(SequenceCmt<f32>),
}

/// Train on the other folds, validate on the held-out fold after every
/// training epoch, and keep the checkpoint with the best validation accuracy.
pub fn run_fold(args: FoldRunArgs<'_>) -> Result<FoldResult> {
    let FoldRunArgs {
        dataset,
        folds,
        fold,
        kind,
        model_config,
        train_config,
        run_dir,
        resume,
    } = args;
    train_config.validate()?;
    model_config.validate()?;
    if fold >= folds.k {
        return Err(Error::Config(format!(
            "fold {} out of range [0, {})",
            fold, folds.k
        )));
    }
    std::fs::create_dir_all(run_dir)?;

    let idxs = channel_indices(dataset, &model_config.modalities)?;
    let mut train_recs = Vec::new();
    let mut val_recs = Vec::new();
    for (ri, rec) in dataset.recordings.iter().enumerate() {
        match folds.fold_of(&rec.subject_id) {
            Some(f) if f == fold => val_recs.push(ri),
            Some(_) => train_recs.push(ri),
            None => {
                return Err(Error::Config(format!(
                    "subject '{}' missing from fold split",
                    rec.subject_id
                )))
            }
        }
    }
    if train_recs.is_empty() {
        return Err(Error::Config("training fold selection is empty".into()));
    }
    if val_recs.is_empty() {
        return Err(Error::Config("validation fold selection is empty".into()));
    }

    // Training sample index.
    enum Samples {
        Epoch(Vec<(usize, usize)>),
        Sequence(Vec<SequenceRef>),
    }
    let samples = match kind {
        ModelKind::Epoch => {
            let mut items = Vec::new();
            for &ri in &train_recs {
                for ei in 0..dataset.recordings[ri].epochs.len() {
                    items.push((ri, ei));
                }
            }
            Samples::Epoch(items)
        }
        ModelKind::Sequence => {
            let all = build_sequences(
                &dataset.recordings,
                model_config.seq_len,
                SequenceMode::Training,
            )?;
            Samples::Sequence(
                all.into_iter()
                    .filter(|s| train_recs.contains(&s.recording))
                    .collect(),
            )
        }
    };
    let n_samples = match &samples {
        Samples::Epoch(v) => v.len(),
        Samples::Sequence(v) => v.len(),
    };
    if n_samples == 0 {
        return Err(Error::Config(
            "no training samples (recordings shorter than the sequence length?)".into(),
        ));
    }

    let model_seed = train_config.seed.wrapping_add(fold as u64 * 1_000_003);
    let state_path = run_dir.join("state.bin");
    let last_path = run_dir.join("last.ckpt");
    let best_path = run_dir.join("best.ckpt");
    let curve_path = run_dir.join("curve.csv");

    let mut model = match kind {
        ModelKind::Epoch => FoldModel::Epoch(EpochCmt::new(model_config, model_seed)?),
        ModelKind::Sequence => FoldModel::Sequence(SequenceCmt::new(model_config, model_seed)?),
    };
    let mut adam = Adam::new(
        train_config.adam(),
        match &model {
            FoldModel::Epoch(m) => m.params(),
            FoldModel::Sequence(m) => m.params(),
        },
    );
    let mut rng = ChaCha20Rng::seed_from_u64(train_config.seed.wrapping_add(fold as u64));
    let mut epochs_done = 0usize;
    let mut steps_done = 0u64;
    let mut best_epoch: Option<usize> = None;
    let mut best_acc = f64::NEG_INFINITY;

    let resuming = resume && state_path.exists() && last_path.exists();
    if resuming {
        let header = load_train_state(&state_path, &mut adam)?;
        let loaded = crate::model::load_checkpoint::<f32>(&last_path)?;
        model = match (kind, loaded) {
            (ModelKind::Epoch, CheckpointModel::Epoch(m)) => FoldModel::Epoch(m),
            (ModelKind::Sequence, CheckpointModel::Sequence(m)) => FoldModel::Sequence(m),
            _ => {
                return Err(Error::Checkpoint(
                    "training-state checkpoint has the wrong model kind".into(),
                ))
            }
        };
        let pos = ((header.rng_word_pos_hi as u128) << 64) | header.rng_word_pos_lo as u128;
        rng.set_word_pos(pos);
        epochs_done = header.epochs_done;
        steps_done = header.steps_done;
        best_epoch = header.best_epoch;
        best_acc = header.best_acc;
        log::info!(
            "event=resume fold={fold} epochs_done={epochs_done} steps_done={steps_done}"
        );
    }

    let mut curve = if resuming {
        std::fs::OpenOptions::new().append(true).open(&curve_path)?
    } else {
        let mut f = File::create(&curve_path)?;
        writeln!(f, "step,loss")?;
        f
    };

    let class_weights = train_config.class_weights_f32();
    let mut final_cm: Option<ConfusionMatrix> = None;
    let mut final_metrics: Option<Metrics> = None;

    for train_epoch in epochs_done..train_config.max_epochs {
        // Shuffle sample order; the RNG stream position is part of the
        // resumable state so an interrupted run replays identically.
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut rng);

        for chunk in order.chunks(train_config.batch_size) {
            let loss = match (&mut model, &samples) {
                (FoldModel::Epoch(m), Samples::Epoch(items)) => {
                    let batch: Vec<(usize, usize)> = chunk.iter().map(|&i| items[i]).collect();
                    let (signals, labels) = epoch_batch(dataset, &batch, &idxs)?;
                    epoch_train_step(m, &mut adam, &signals, &labels, &class_weights)?
                }
                (FoldModel::Sequence(m), Samples::Sequence(refs)) => {
                    let batch: Vec<SequenceRef> = chunk.iter().map(|&i| refs[i]).collect();
                    let (signals, labels) =
                        sequence_batch(dataset, &batch, model_config.seq_len, &idxs)?;
                    sequence_train_step(m, &mut adam, &signals, &labels, &class_weights)?
                }
                _ => unreachable!(),
            };
            steps_done += 1;
            writeln!(curve, "{steps_done},{loss}")?;
        }
        curve.flush()?;

        // Validation pass on the held-out fold.
        let cm = match &model {
            FoldModel::Epoch(m) => {
                evaluate_epoch_model(m, dataset, &val_recs, train_config.batch_size)?
            }
            FoldModel::Sequence(m) => evaluate_sequence_model(m, dataset, &val_recs)?.0,
        };
        let metrics = compute_metrics(&cm)?;
        log::info!(
            "event=val fold={fold} train_epoch={train_epoch} acc={:.4} kappa={:.4}",
            metrics.acc,
            metrics.kappa
        );
        if metrics.acc > best_acc {
            best_acc = metrics.acc;
            best_epoch = Some(train_epoch);
            let ckpt = match &model {
                FoldModel::Epoch(m) => CheckpointModel::Epoch(m_clone_epoch(m)?),
                FoldModel::Sequence(m) => CheckpointModel::Sequence(m_clone_sequence(m)?),
            };
            save_checkpoint(&ckpt, &best_path)?;
            final_cm = Some(cm.clone());
            final_metrics = Some(metrics.clone());
        }

        // Epoch-boundary resume point.
        let ckpt = match &model {
            FoldModel::Epoch(m) => CheckpointModel::Epoch(m_clone_epoch(m)?),
            FoldModel::Sequence(m) => CheckpointModel::Sequence(m_clone_sequence(m)?),
        };
        save_checkpoint(&ckpt, &last_path)?;
        let pos = rng.get_word_pos();
        save_train_state(
            &state_path,
            &TrainStateHeader {
                epochs_done: train_epoch + 1,
                steps_done,
                adam_step: adam.step_count(),
                rng_word_pos_hi: (pos >> 64) as u64,
                rng_word_pos_lo: pos as u64,
                best_epoch,
                best_acc,
            },
            &adam,
        )?;
    }

    let confusion = final_cm
        .ok_or_else(|| Error::Internal("no validation pass completed".into()))?;
    let metrics = final_metrics.unwrap();
    confusion.write_csv(run_dir.join("confusion.csv"))?;
    metrics.write_json(run_dir.join("metrics.json"))?;
    Ok(FoldResult {
        fold,
        confusion,
        metrics,
        best_epoch: best_epoch.unwrap_or(0),
        best_checkpoint: best_path,
        steps: steps_done,
    })
}

// Checkpoint cloning goes through serialization to keep a single source of
// truth for what a stored model contains.
fn m_clone_epoch(m: &EpochCmt<f32>) -> Result<EpochCmt<f32>> {
    let mut fresh = EpochCmt::new(m.config(), 0)?;
    for i in 0..m.params().len() {
        *fresh.params_mut().param_by_index_mut(i) = m.params().param_by_index(i).clone();
    }
    for i in 0..m.params().buffers().len() {
        fresh
            .params_mut()
            .set_buffer_by_index(i, m.params().buffers()[i].clone());
    }
    Ok(fresh)
}

fn m_clone_sequence(m: &SequenceCmt<f32>) -> Result<SequenceCmt<f32>> {
    let mut fresh = SequenceCmt::new(m.config(), 0)?;
    for i in 0..m.params().len() {
        *fresh.params_mut().param_by_index_mut(i) = m.params().param_by_index(i).clone();
    }
    for i in 0..m.params().buffers().len() {
        fresh
            .params_mut()
            .set_buffer_by_index(i, m.params().buffers()[i].clone());
    }
    Ok(fresh)
}

/// Pool per-fold confusion matrices and compute metrics on the pooled matrix.
pub fn aggregate_cv(per_fold: &[(usize, ConfusionMatrix)], k: usize) -> Result<(ConfusionMatrix, Metrics)> {
    for fold in 0..k {
        if !per_fold.iter().any(|(f, _)| *f == fold) {
            return Err(Error::Input(format!("missing results for fold {fold}")));
        }
    }
    let mut pooled = ConfusionMatrix::new();
    for (_, cm) in per_fold {
        pooled.merge(cm);
    }
    let metrics = compute_metrics(&pooled)?;
    Ok((pooled, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_requires_all_folds() {
        let cm = ConfusionMatrix::from_pairs(&[(0, 0)]).unwrap();
        assert!(aggregate_cv(&[(0, cm.clone())], 2).is_err());
        assert!(aggregate_cv(&[(0, cm.clone()), (1, cm)], 2).is_ok());
    }

    #[test]
    fn identical_fold_matrices_pool_to_the_same_metrics() {
        let cm = ConfusionMatrix::from_pairs(&[(0, 0), (1, 1), (2, 2), (3, 0), (4, 4)]).unwrap();
        let single = compute_metrics(&cm).unwrap();
        let (_, pooled) =
            aggregate_cv(&[(0, cm.clone()), (1, cm.clone()), (2, cm)], 3).unwrap();
        assert!((single.acc - pooled.acc).abs() < 1e-12);
        assert!((single.kappa - pooled.kappa).abs() < 1e-12);
        assert!((single.mf1 - pooled.mf1).abs() < 1e-12);
    }

    #[test]
    fn pooled_accuracy_is_sample_weighted() {
        // fold A: 80/100 correct; fold B: 180/300 correct -> pooled 260/400
        let mut a = ConfusionMatrix::new();
        for _ in 0..80 {
            a.accumulate(0, 0).unwrap();
        }
        for _ in 0..20 {
            a.accumulate(0, 1).unwrap();
        }
        let mut b = ConfusionMatrix::new();
        for _ in 0..180 {
            b.accumulate(1, 1).unwrap();
        }
        for _ in 0..120 {
            b.accumulate(1, 0).unwrap();
        }
        let (pooled, metrics) = aggregate_cv(&[(0, a), (1, b)], 2).unwrap();
        assert_eq!(pooled.total(), 400);
        assert!((metrics.acc - 0.65).abs() < 1e-12);
    }
}
