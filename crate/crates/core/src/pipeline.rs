//! The preprocessing chain: bandpass filter, per-recording normalization,
//! label mapping, wake trimming, and epoch segmentation.
//!
//! Recordings are independent, so the batch entry point fans out one worker
//! per recording.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, EpochRecord, ProcessedRecording};
use crate::error::{Error, Result};
use crate::exec;
use crate::filter::{design_fir_bandpass, zero_phase_filter, FirFilter};
use crate::labels::{map_raw_label, AasmStage, MappedLabel};
use crate::manifest::Recording;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Channels kept as model inputs, in modality order. Channels present in
    /// a recording but not listed here are ingested and ignored.
    pub channels: Vec<String>,
    pub fs: f64,
    pub low_hz: f64,
    pub high_hz: f64,
    pub filter_taps: usize,
    pub epoch_seconds: f64,
    /// Wake epochs kept before/after the sleep period (60 epochs = 30 min).
    pub wake_margin_epochs: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            channels: vec!["EEG Fpz-Cz".to_string(), "EOG horizontal".to_string()],
            fs: 100.0,
            low_hz: 0.2,
            high_hz: 40.0,
            filter_taps: 1001,
            epoch_seconds: 30.0,
            wake_margin_epochs: 60,
        }
    }
}

impl PreprocessConfig {
    pub fn epoch_samples(&self) -> usize {
        (self.fs * self.epoch_seconds).round() as usize
    }

    pub fn design_filter(&self) -> Result<FirFilter> {
        design_fir_bandpass(self.fs, self.low_hz, self.high_hz, self.filter_taps)
    }
}

/// Scale to zero mean and unit population variance, in place. A constant
/// signal becomes all zeros; returns false in that degenerate case.
pub fn normalize(signal: &mut [f64]) -> bool {
    let n = signal.len() as f64;
    let mean = signal.iter().sum::<f64>() / n;
    let var = signal.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        for v in signal.iter_mut() {
            *v = 0.0;
        }
        return false;
    }
    let inv_std = 1.0 / var.sqrt();
    for v in signal.iter_mut() {
        *v = (*v - mean) * inv_std;
    }
    true
}

/// Retained hypnogram range: `margin` epochs of wake kept on each side of the
/// first/last non-wake epoch, clamped to bounds. All-wake recordings are
/// rejected.
pub fn trim_wake(labels: &[MappedLabel], margin: usize) -> Result<(usize, usize)> {
    let is_sleep = |l: &MappedLabel| {
        matches!(l, MappedLabel::Stage(s) if *s != AasmStage::Wake)
    };
    let first = labels.iter().position(is_sleep);
    let last = labels.iter().rposition(is_sleep);
    match (first, last) {
        (Some(first), Some(last)) => Ok((
            first.saturating_sub(margin),
            (last + margin).min(labels.len() - 1),
        )),
        _ => Err(Error::Input(
            "recording contains no non-wake epochs".into(),
        )),
    }
}

/// Cut the retained range into labeled 30 s epochs, skipping discarded
/// labels. Channel data is interleaved `[T, C]` per epoch.
pub fn segment_epochs(
    channels: &[Vec<f64>],
    labels: &[MappedLabel],
    retained: (usize, usize),
    epoch_samples: usize,
) -> Result<Vec<EpochRecord>> {
    let needed = (retained.1 + 1) * epoch_samples;
    for (ci, chan) in channels.iter().enumerate() {
        if chan.len() < needed {
            return Err(Error::Integrity(format!(
                "channel {ci} has {} samples but the hypnogram needs {needed}",
                chan.len()
            )));
        }
    }
    let c = channels.len();
    let mut out = Vec::new();
    for idx in retained.0..=retained.1 {
        let stage = match labels[idx] {
            MappedLabel::Stage(s) => s,
            MappedLabel::Discard => continue,
        };
        let mut samples = vec![0f32; epoch_samples * c];
        let base = idx * epoch_samples;
        for (ci, chan) in channels.iter().enumerate() {
            for t in 0..epoch_samples {
                samples[t * c + ci] = chan[base + t] as f32;
            }
        }
        out.push(EpochRecord {
            orig_index: idx,
            label: stage,
            samples,
        });
    }
    Ok(out)
}

/// Run the full chain on one recording: select channels, filter, normalize,
/// map labels, trim wake, segment.
pub fn preprocess_recording(
    rec: &Recording,
    cfg: &PreprocessConfig,
    filt: &FirFilter,
) -> Result<ProcessedRecording> {
    let epoch_samples = cfg.epoch_samples();

    // Select and validate the model-input channels.
    let mut channels: Vec<Vec<f64>> = Vec::with_capacity(cfg.channels.len());
    for name in &cfg.channels {
        let (samples, fs) = rec.channels.get(name).ok_or_else(|| {
            Error::Input(format!(
                "recording {} is missing channel '{}'",
                rec.recording_id, name
            ))
        })?;
        if (fs - cfg.fs).abs() > 1e-9 {
            return Err(Error::Input(format!(
                "recording {} channel '{}' sampled at {} Hz, expected {}",
                rec.recording_id, name, fs, cfg.fs
            )));
        }
        channels.push(samples.clone());
    }
    let shortest = channels.iter().map(Vec::len).min().unwrap_or(0);
    if rec.hypnogram.len() * epoch_samples > shortest {
        return Err(Error::Integrity(format!(
            "recording {}: hypnogram covers {} samples but shortest channel has {}",
            rec.recording_id,
            rec.hypnogram.len() * epoch_samples,
            shortest
        )));
    }

    // Map labels before any signal work so label errors surface early.
    let mut labels = Vec::with_capacity(rec.hypnogram.len());
    for (i, token) in rec.hypnogram.iter().enumerate() {
        labels.push(map_raw_label(token).map_err(|e| {
            Error::Parse(format!("recording {}: {e} at epoch {i}", rec.recording_id))
        })?);
    }

    for (ci, chan) in channels.iter_mut().enumerate() {
        *chan = zero_phase_filter(chan, filt)?;
        if !normalize(chan) {
            log::warn!(
                "event=constant_channel recording={} channel={}",
                rec.recording_id,
                cfg.channels[ci]
            );
        }
    }

    let retained = trim_wake(&labels, cfg.wake_margin_epochs)?;
    let epochs = segment_epochs(&channels, &labels, retained, epoch_samples)?;
    let discarded = (retained.1 - retained.0 + 1) - epochs.len();
    Ok(ProcessedRecording {
        recording_id: rec.recording_id.clone(),
        subject_id: rec.subject_id.clone(),
        epochs,
        retained_range: retained,
        discarded,
    })
}

/// Per-recording outcome of a batch preprocess run.
pub struct PreprocessOutcome {
    pub dataset: Dataset,
    /// (recording_id, error message) for recordings that failed or were excluded.
    pub failures: Vec<(String, String)>,
}

/// Preprocess many recordings, one worker per recording. Failed recordings
/// are reported, not fatal; the error is propagated only if every recording
/// fails.
pub fn preprocess_recordings(
    recordings: &[Recording],
    cfg: &PreprocessConfig,
) -> Result<PreprocessOutcome> {
    let filt = cfg.design_filter()?;
    let results = exec::map_collect(recordings, |rec| {
        preprocess_recording(rec, cfg, &filt).map_err(|e| (rec.recording_id.clone(), e))
    });
    let mut processed = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(p) => processed.push(p),
            Err((id, e)) => {
                log::warn!("event=recording_excluded recording={id} reason=\"{e}\"");
                failures.push((id, e.to_string()));
            }
        }
    }
    if processed.is_empty() {
        return Err(Error::Input(format!(
            "all {} recordings failed preprocessing",
            recordings.len()
        )));
    }
    Ok(PreprocessOutcome {
        dataset: Dataset {
            fs: cfg.fs,
            epoch_samples: cfg.epoch_samples(),
            channels: cfg.channels.clone(),
            recordings: processed,
        },
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_hand_example() {
        let mut x = vec![0.0, 0.0, 2.0, 2.0];
        assert!(normalize(&mut x));
        assert_eq!(x, vec![-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.5).collect();
        normalize(&mut x);
        let once = x.clone();
        normalize(&mut x);
        for (a, b) in x.iter().zip(&once) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_constant_returns_zeros() {
        let mut x = vec![7.0; 10];
        assert!(!normalize(&mut x));
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trim_wake_hand_counted() {
        // 200 W, 100 N2, 200 W -> retained [140, 359]
        let mut labels = vec![MappedLabel::Stage(AasmStage::Wake); 200];
        labels.extend(vec![MappedLabel::Stage(AasmStage::N2); 100]);
        labels.extend(vec![MappedLabel::Stage(AasmStage::Wake); 200]);
        assert_eq!(trim_wake(&labels, 60).unwrap(), (140, 359));
    }

    #[test]
    fn trim_wake_clamps_to_bounds() {
        let mut labels = vec![MappedLabel::Stage(AasmStage::Wake); 10];
        labels.push(MappedLabel::Stage(AasmStage::N1));
        labels.extend(vec![MappedLabel::Stage(AasmStage::Wake); 5]);
        assert_eq!(trim_wake(&labels, 60).unwrap(), (0, 15));
    }

    #[test]
    fn trim_wake_no_margin_needed() {
        let labels = vec![MappedLabel::Stage(AasmStage::N2); 8];
        assert_eq!(trim_wake(&labels, 60).unwrap(), (0, 7));
    }

    #[test]
    fn trim_wake_rejects_all_wake() {
        let labels = vec![MappedLabel::Stage(AasmStage::Wake); 30];
        assert!(trim_wake(&labels, 60).is_err());
    }

    #[test]
    fn segment_skips_discards_and_preserves_indexing() {
        let epoch_samples = 4;
        let chan: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let mut labels = vec![MappedLabel::Stage(AasmStage::N2); 10];
        labels[3] = MappedLabel::Discard;
        let epochs = segment_epochs(&[chan], &labels, (1, 8), epoch_samples).unwrap();
        assert_eq!(epochs.len(), 7); // 8 retained - 1 discarded
        // sample t of epoch k maps to raw index k*epoch_samples + t
        let e = &epochs[0];
        assert_eq!(e.orig_index, 1);
        assert_eq!(e.samples[0], 4.0);
        assert_eq!(e.samples[3], 7.0);
    }

    #[test]
    fn segment_rejects_short_channel() {
        let chan = vec![0.0; 10];
        let labels = vec![MappedLabel::Stage(AasmStage::N2); 10];
        assert!(segment_epochs(&[chan], &labels, (0, 9), 4).is_err());
    }
}
