//! Processed dataset storage, subject-independent folds, and sequence
//! window enumeration.
//!
//! On-disk layout (versioned; see README):
//!   out_dir/index.json          dataset metadata + per-recording epoch tables
//!   out_dir/rec-<id>.f32        float32 LE samples, epoch-major, each epoch
//!                               stored `[T, C]` row-major
//!
//! Epoch tables keep each epoch's original hypnogram index; gaps left by
//! discarded epochs break sequence contiguity.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::AasmStage;

pub const DATASET_FORMAT: &str = "cmt-processed";
pub const DATASET_VERSION: u32 = 1;
pub const FOLDS_FORMAT: &str = "cmt-folds";

/// One preprocessed 30 s epoch.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    /// Index into the recording's original hypnogram.
    pub orig_index: usize,
    pub label: AasmStage,
    /// `epoch_samples * channels` values, `[T, C]` row-major.
    pub samples: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct ProcessedRecording {
    pub recording_id: String,
    pub subject_id: String,
    pub epochs: Vec<EpochRecord>,
    /// Inclusive retained hypnogram range after wake trimming.
    pub retained_range: (usize, usize),
    /// Discarded (movement/unscored) epochs inside the retained range.
    pub discarded: usize,
}

impl ProcessedRecording {
    pub fn class_counts(&self) -> [usize; 5] {
        let mut counts = [0usize; 5];
        for e in &self.epochs {
            counts[e.label.index()] += 1;
        }
        counts
    }
}

/// A fully loaded processed dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub fs: f64,
    pub epoch_samples: usize,
    pub channels: Vec<String>,
    pub recordings: Vec<ProcessedRecording>,
}

#[derive(Serialize, Deserialize)]
struct IndexEpoch {
    i: usize,
    l: String,
}

#[derive(Serialize, Deserialize)]
struct IndexRecording {
    recording_id: String,
    subject_id: String,
    data_file: String,
    retained_range: (usize, usize),
    discarded: usize,
    class_counts: BTreeMap<String, usize>,
    epochs: Vec<IndexEpoch>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    fs: f64,
    epoch_samples: usize,
    channels: Vec<String>,
    recordings: Vec<IndexRecording>,
}

impl Dataset {
    pub fn subjects(&self) -> Vec<String> {
        let mut subjects: Vec<String> = self
            .recordings
            .iter()
            .map(|r| r.subject_id.clone())
            .collect();
        subjects.sort();
        subjects.dedup();
        subjects
    }

    pub fn total_epochs(&self) -> usize {
        self.recordings.iter().map(|r| r.epochs.len()).sum()
    }

    /// Pooled class counts over every recording, indexed by stage.
    pub fn class_counts(&self) -> [usize; 5] {
        let mut counts = [0usize; 5];
        for r in &self.recordings {
            for (i, c) in r.class_counts().iter().enumerate() {
                counts[i] += c;
            }
        }
        counts
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut index_recordings = Vec::with_capacity(self.recordings.len());
        for rec in &self.recordings {
            let data_file = format!("rec-{}.f32", rec.recording_id);
            let mut w = BufWriter::new(fs::File::create(dir.join(&data_file))?);
            for epoch in &rec.epochs {
                if epoch.samples.len() != self.epoch_samples * self.channels.len() {
                    return Err(Error::Integrity(format!(
                        "recording {} epoch {} has {} samples, expected {}",
                        rec.recording_id,
                        epoch.orig_index,
                        epoch.samples.len(),
                        self.epoch_samples * self.channels.len()
                    )));
                }
                for &v in &epoch.samples {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()?;
            let class_counts = AasmStage::ALL
                .iter()
                .zip(rec.class_counts())
                .map(|(s, c)| (s.name().to_string(), c))
                .collect();
            index_recordings.push(IndexRecording {
                recording_id: rec.recording_id.clone(),
                subject_id: rec.subject_id.clone(),
                data_file,
                retained_range: rec.retained_range,
                discarded: rec.discarded,
                class_counts,
                epochs: rec
                    .epochs
                    .iter()
                    .map(|e| IndexEpoch {
                        i: e.orig_index,
                        l: e.label.name().to_string(),
                    })
                    .collect(),
            });
        }
        let index = IndexFile {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            fs: self.fs,
            epoch_samples: self.epoch_samples,
            channels: self.channels.clone(),
            recordings: index_recordings,
        };
        let mut f = BufWriter::new(fs::File::create(dir.join("index.json"))?);
        serde_json::to_writer_pretty(&mut f, &index)?;
        f.flush()?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("index.json"))?;
        let index: IndexFile = serde_json::from_str(&text)?;
        if index.format != DATASET_FORMAT {
            return Err(Error::Parse(format!(
                "unexpected dataset format '{}'",
                index.format
            )));
        }
        if index.version != DATASET_VERSION {
            return Err(Error::Parse(format!(
                "unsupported dataset version {}",
                index.version
            )));
        }
        let epoch_len = index.epoch_samples * index.channels.len();
        let mut recordings = Vec::with_capacity(index.recordings.len());
        for rec in index.recordings {
            let mut bytes = Vec::new();
            fs::File::open(dir.join(&rec.data_file))?.read_to_end(&mut bytes)?;
            let expected = rec.epochs.len() * epoch_len * 4;
            if bytes.len() != expected {
                return Err(Error::Integrity(format!(
                    "{}: {} bytes, expected {}",
                    rec.data_file,
                    bytes.len(),
                    expected
                )));
            }
            let mut epochs = Vec::with_capacity(rec.epochs.len());
            for (n, meta) in rec.epochs.iter().enumerate() {
                let label = match meta.l.as_str() {
                    "W" => AasmStage::Wake,
                    "N1" => AasmStage::N1,
                    "N2" => AasmStage::N2,
                    "N3" => AasmStage::N3,
                    "REM" => AasmStage::Rem,
                    other => {
                        return Err(Error::Parse(format!("unknown stage '{other}' in index")))
                    }
                };
                let start = n * epoch_len * 4;
                let samples: Vec<f32> = bytes[start..start + epoch_len * 4]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                epochs.push(EpochRecord {
                    orig_index: meta.i,
                    label,
                    samples,
                });
            }
            recordings.push(ProcessedRecording {
                recording_id: rec.recording_id,
                subject_id: rec.subject_id,
                epochs,
                retained_range: rec.retained_range,
                discarded: rec.discarded,
            });
        }
        Ok(Dataset {
            fs: index.fs,
            epoch_samples: index.epoch_samples,
            channels: index.channels,
            recordings,
        })
    }
}

/// Subject-to-fold assignment for subject-independent cross validation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldSplit {
    pub format: String,
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignments.get(subject).copied()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<FoldSplit> {
        let split: FoldSplit = serde_json::from_str(&fs::read_to_string(path)?)?;
        if split.format != FOLDS_FORMAT {
            return Err(Error::Parse(format!(
                "unexpected folds format '{}'",
                split.format
            )));
        }
        Ok(split)
    }
}

/// Deterministic subject-independent folds: sort, shuffle by seed, assign
/// round-robin so fold sizes differ by at most one.
pub fn subject_independent_folds(subjects: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    let mut unique: Vec<String> = subjects.to_vec();
    unique.sort();
    unique.dedup();
    if k == 0 {
        return Err(Error::Config("fold count must be positive".into()));
    }
    if unique.len() < k {
        return Err(Error::Config(format!(
            "{} subjects cannot fill {} folds",
            unique.len(),
            k
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let assignments = unique
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i % k))
        .collect();
    Ok(FoldSplit {
        format: FOLDS_FORMAT.to_string(),
        k,
        seed,
        assignments,
    })
}

/// How sequence windows tile a recording.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceMode {
    /// Non-overlapping consecutive windows.
    Training,
    /// Every stride-1 window, for mean-probability inference.
    Inference,
}

/// A window of `len` consecutive epochs starting at `start` within recording
/// `recording` (indices into `Dataset::recordings` / its epoch list).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceRef {
    pub recording: usize,
    pub start: usize,
}

/// Enumerate sequence windows, honoring contiguity breaks left by discarded
/// epochs. Recordings (or contiguous runs) shorter than `len` are skipped and
/// logged.
pub fn build_sequences(
    recordings: &[ProcessedRecording],
    len: usize,
    mode: SequenceMode,
) -> Result<Vec<SequenceRef>> {
    if len < 2 {
        return Err(Error::Config(format!(
            "sequence length must be at least 2, got {len}"
        )));
    }
    let mut out = Vec::new();
    for (ri, rec) in recordings.iter().enumerate() {
        if rec.epochs.len() < len {
            log::warn!(
                "event=recording_skipped recording={} epochs={} needed={}",
                rec.recording_id,
                rec.epochs.len(),
                len
            );
            continue;
        }
        let mut run_start = 0usize;
        for i in 1..=rec.epochs.len() {
            let broke = i == rec.epochs.len()
                || rec.epochs[i].orig_index != rec.epochs[i - 1].orig_index + 1;
            if !broke {
                continue;
            }
            let run_len = i - run_start;
            if run_len >= len {
                match mode {
                    SequenceMode::Training => {
                        let mut s = run_start;
                        while s + len <= run_start + run_len {
                            out.push(SequenceRef {
                                recording: ri,
                                start: s,
                            });
                            s += len;
                        }
                    }
                    SequenceMode::Inference => {
                        for s in run_start..=run_start + run_len - len {
                            out.push(SequenceRef {
                                recording: ri,
                                start: s,
                            });
                        }
                    }
                }
            }
            run_start = i;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec_with_epochs(n: usize) -> ProcessedRecording {
        ProcessedRecording {
            recording_id: "r0".into(),
            subject_id: "s0".into(),
            epochs: (0..n)
                .map(|i| EpochRecord {
                    orig_index: i,
                    label: AasmStage::N2,
                    samples: vec![0.0; 4],
                })
                .collect(),
            retained_range: (0, n.saturating_sub(1)),
            discarded: 0,
        }
    }

    #[test]
    fn training_windows_are_non_overlapping() {
        // 12 epochs, L=5 -> 2 windows (0-4, 5-9)
        let recs = [rec_with_epochs(12)];
        let seqs = build_sequences(&recs, 5, SequenceMode::Training).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].start, 0);
        assert_eq!(seqs[1].start, 5);
    }

    #[test]
    fn inference_windows_are_stride_one() {
        // 12 epochs, L=5 -> 8 windows
        let recs = [rec_with_epochs(12)];
        let seqs = build_sequences(&recs, 5, SequenceMode::Inference).unwrap();
        assert_eq!(seqs.len(), 8);
    }

    #[test]
    fn short_recording_is_skipped() {
        let recs = [rec_with_epochs(4)];
        let seqs = build_sequences(&recs, 5, SequenceMode::Training).unwrap();
        assert!(seqs.is_empty());
    }

    #[test]
    fn discard_gaps_break_contiguity() {
        let mut rec = rec_with_epochs(10);
        // remove orig_index 4: runs of 4 and 5
        rec.epochs.remove(4);
        let seqs = build_sequences(&[rec], 5, SequenceMode::Training).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].start, 4); // the 5-long run after the gap
    }

    #[test]
    fn folds_are_balanced_and_deterministic() {
        let subjects: Vec<String> = (0..78).map(|i| format!("S{i:02}")).collect();
        let a = subject_independent_folds(&subjects, 5, 7).unwrap();
        let b = subject_independent_folds(&subjects, 5, 7).unwrap();
        assert_eq!(a.assignments, b.assignments);
        let mut sizes = [0usize; 5];
        for (_, &f) in &a.assignments {
            sizes[f] += 1;
        }
        let mut sorted = sizes.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![15, 15, 16, 16, 16]);
    }

    #[test]
    fn folds_reject_too_few_subjects() {
        let subjects: Vec<String> = (0..3).map(|i| format!("S{i}")).collect();
        assert!(subject_independent_folds(&subjects, 5, 0).is_err());
    }
}
