//! Synthetic class-separable recordings for tests, benchmarks, and demos.
//!
//! Each sleep stage gets a distinct sinusoid frequency per channel, plus
//! Gaussian noise, so a working model can overfit quickly and the full
//! manifest -> preprocess -> train -> evaluate path can run without real
//! polysomnography data.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, EpochRecord, ProcessedRecording};
use crate::error::Result;
use crate::labels::AasmStage;

/// Stage-specific base frequencies (Hz), all inside the 0.2-40 Hz band.
pub const CLASS_FREQS: [f64; 5] = [2.0, 5.0, 9.0, 14.0, 22.0];

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub subjects: usize,
    pub epochs_per_class: usize,
    pub channels: usize,
    pub fs: f64,
    pub epoch_samples: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 3,
            epochs_per_class: 10,
            channels: 2,
            fs: 100.0,
            epoch_samples: 3000,
            noise: 0.1,
            seed: 7,
        }
    }
}

fn epoch_signal(
    rng: &mut ChaCha20Rng,
    stage: AasmStage,
    cfg: &SynthConfig,
) -> Vec<f32> {
    let noise = Normal::new(0.0, cfg.noise).unwrap();
    let base = CLASS_FREQS[stage.index()];
    let mut samples = vec![0f32; cfg.epoch_samples * cfg.channels];
    for c in 0..cfg.channels {
        // Each channel sees a related but distinct frequency.
        let freq = base * (1.0 + 0.15 * c as f64);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for t in 0..cfg.epoch_samples {
            let x = (std::f64::consts::TAU * freq * t as f64 / cfg.fs + phase).sin()
                + noise.sample(rng);
            samples[t * cfg.channels + c] = x as f32;
        }
    }
    samples
}

/// Label sequence for one synthetic recording: contiguous runs per class in a
/// seeded order, so sequence windows see realistic within-stage continuity.
fn label_plan(rng: &mut ChaCha20Rng, epochs_per_class: usize) -> Vec<AasmStage> {
    let mut order = AasmStage::ALL.to_vec();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut labels = Vec::with_capacity(5 * epochs_per_class);
    for stage in order {
        labels.extend(std::iter::repeat(stage).take(epochs_per_class));
    }
    labels
}

/// Build an already-processed dataset in memory (no filtering), one recording
/// per subject.
pub fn synth_dataset(cfg: &SynthConfig) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut recordings = Vec::with_capacity(cfg.subjects);
    for s in 0..cfg.subjects {
        let labels = label_plan(&mut rng, cfg.epochs_per_class);
        let epochs = labels
            .iter()
            .enumerate()
            .map(|(i, &stage)| EpochRecord {
                orig_index: i,
                label: stage,
                samples: epoch_signal(&mut rng, stage, cfg),
            })
            .collect::<Vec<_>>();
        let n = epochs.len();
        recordings.push(ProcessedRecording {
            recording_id: format!("SYN{s:02}"),
            subject_id: format!("SYN{s:02}"),
            epochs,
            retained_range: (0, n - 1),
            discarded: 0,
        });
    }
    Dataset {
        fs: cfg.fs,
        epoch_samples: cfg.epoch_samples,
        channels: (0..cfg.channels).map(|c| format!("ch{c}")).collect(),
        recordings,
    }
}

/// Raw-recording plan for manifest generation.
pub struct SynthRawConfig {
    pub recordings: usize,
    pub sleep_epochs: usize,
    pub leading_wake: usize,
    pub trailing_wake: usize,
    /// Insert one movement and one unscored epoch into each recording.
    pub with_artifacts: bool,
    pub channels: Vec<String>,
    pub fs: f64,
    pub epoch_samples: usize,
    pub seed: u64,
}

impl Default for SynthRawConfig {
    fn default() -> Self {
        Self {
            recordings: 3,
            sleep_epochs: 20,
            leading_wake: 8,
            trailing_wake: 8,
            with_artifacts: true,
            channels: vec!["EEG Fpz-Cz".to_string(), "EOG horizontal".to_string()],
            fs: 100.0,
            epoch_samples: 3000,
            seed: 11,
        }
    }
}

/// Write raw channel files, label files, and a manifest under `dir`;
/// returns the manifest path.
pub fn write_synth_manifest(dir: impl AsRef<Path>, cfg: &SynthRawConfig) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut manifest = Vec::new();
    for r in 0..cfg.recordings {
        let subject = format!("SYN{r:02}");
        // Raw label plan: leading wake, sleep (cycling stages incl. stage 4),
        // optional artifacts, trailing wake.
        let mut tokens: Vec<String> = Vec::new();
        tokens.extend(std::iter::repeat("W".to_string()).take(cfg.leading_wake));
        for i in 0..cfg.sleep_epochs {
            let tok = match i % 6 {
                0 => "1",
                1 => "2",
                2 => "3",
                3 => "4", // exercises the stage-4 -> N3 merge
                4 => "R",
                _ => "2",
            };
            tokens.push(tok.to_string());
        }
        if cfg.with_artifacts {
            tokens.insert(cfg.leading_wake + 2, "M".to_string());
            tokens.push("?".to_string());
        }
        tokens.extend(std::iter::repeat("W".to_string()).take(cfg.trailing_wake));

        // Signals: per-epoch sinusoid matching the mapped stage, wake/artifact
        // epochs get low-frequency drift.
        let total = tokens.len() * cfg.epoch_samples;
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut files = BTreeMap::new();
        for (ci, chan_name) in cfg.channels.iter().enumerate() {
            let mut samples = vec![0f32; total];
            for (ei, tok) in tokens.iter().enumerate() {
                let stage_idx = match tok.as_str() {
                    "W" => 0,
                    "1" => 1,
                    "2" => 2,
                    "3" | "4" => 3,
                    "R" => 4,
                    _ => 0,
                };
                let freq = CLASS_FREQS[stage_idx] * (1.0 + 0.15 * ci as f64);
                let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                for t in 0..cfg.epoch_samples {
                    let i = ei * cfg.epoch_samples + t;
                    samples[i] = ((std::f64::consts::TAU * freq * t as f64 / cfg.fs + phase)
                        .sin()
                        + noise.sample(&mut rng)) as f32;
                }
            }
            let fname = format!("{subject}-{}.f32", chan_name.replace(' ', "_"));
            let mut f = fs::File::create(dir.join(&fname))?;
            for v in &samples {
                f.write_all(&v.to_le_bytes())?;
            }
            files.insert(chan_name.clone(), fname);
        }
        let labels_file = format!("{subject}.labels");
        fs::write(dir.join(&labels_file), tokens.join("\n") + "\n")?;

        let channels_json: BTreeMap<String, serde_json::Value> = files
            .into_iter()
            .map(|(name, path)| {
                (
                    name,
                    serde_json::json!({ "path": path, "fs": cfg.fs }),
                )
            })
            .collect();
        manifest.push(serde_json::json!({
            "subject_id": subject,
            "channels": channels_json,
            "labels_path": labels_file,
        }));
    }
    let manifest_path = dir.join("manifest.json");
    fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_dataset_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = synth_dataset(&cfg);
        let b = synth_dataset(&cfg);
        assert_eq!(a.recordings.len(), b.recordings.len());
        assert_eq!(
            a.recordings[0].epochs[0].samples,
            b.recordings[0].epochs[0].samples
        );
    }

    #[test]
    fn synth_dataset_has_expected_counts() {
        let cfg = SynthConfig {
            subjects: 2,
            epochs_per_class: 4,
            epoch_samples: 200,
            ..Default::default()
        };
        let ds = synth_dataset(&cfg);
        assert_eq!(ds.total_epochs(), 2 * 5 * 4);
        assert_eq!(ds.class_counts(), [8, 8, 8, 8, 8]);
    }
}
