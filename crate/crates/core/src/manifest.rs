//! Raw-recording ingest: a JSON manifest listing recordings, each pointing to
//! one headerless little-endian float32 file per channel plus a labels text
//! file (one raw token per line). Paths are resolved relative to the
//! manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Deserialize)]
pub struct ChannelRef {
    pub path: String,
    pub fs: f64,
}

#[derive(Clone, Debug, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    /// Defaults to `subject_id`; required when one subject has several nights.
    #[serde(default)]
    pub recording_id: Option<String>,
    pub channels: BTreeMap<String, ChannelRef>,
    pub labels_path: String,
}

impl ManifestEntry {
    pub fn effective_id(&self) -> &str {
        self.recording_id.as_deref().unwrap_or(&self.subject_id)
    }
}

/// One subject-night of raw multichannel signal plus its hypnogram tokens.
#[derive(Clone, Debug)]
pub struct Recording {
    pub recording_id: String,
    pub subject_id: String,
    /// Channel name -> (samples, sampling rate).
    pub channels: BTreeMap<String, (Vec<f64>, f64)>,
    /// Raw hypnogram tokens at 30 s granularity, unmapped.
    pub hypnogram: Vec<String>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<(Vec<ManifestEntry>, PathBuf)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read manifest {}: {e}", path.display())))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("manifest {}: {e}", path.display())))?;
    if entries.is_empty() {
        return Err(Error::Input("manifest lists no recordings".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.effective_id().to_string()) {
            return Err(Error::Input(format!(
                "duplicate recording id '{}' (set recording_id per night)",
                e.effective_id()
            )));
        }
    }
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    Ok((entries, base))
}

/// Headerless little-endian float32 samples.
pub fn read_raw_f32(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(|e| Error::Input(format!("cannot read channel {}: {e}", path.display())))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Parse(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

/// Load one manifest entry's signals and raw labels from disk.
pub fn load_recording(entry: &ManifestEntry, base: &Path) -> Result<Recording> {
    let mut channels = BTreeMap::new();
    for (name, chan) in &entry.channels {
        let samples = read_raw_f32(base.join(&chan.path))?;
        channels.insert(name.clone(), (samples, chan.fs));
    }
    let labels_path = base.join(&entry.labels_path);
    let text = fs::read_to_string(&labels_path).map_err(|e| {
        Error::Input(format!("cannot read labels {}: {e}", labels_path.display()))
    })?;
    let hypnogram = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    Ok(Recording {
        recording_id: entry.effective_id().to_string(),
        subject_id: entry.subject_id.clone(),
        channels,
        hypnogram,
    })
}
