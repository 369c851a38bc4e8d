//! The epoch and sequence cross-modal transformer architectures.
//!
//! Both models share the same epoch-level core: a multi-scale 1-d CNN per
//! modality, a learnable CLS vector prepended to the windowed features,
//! intra-modal attention, and a cross-modal attention stage over the
//! per-modality CLS representations. The epoch model classifies a single
//! 30 s epoch; the sequence model stacks per-epoch CLS outputs, adds an
//! inter-epoch attention stage, and classifies all positions at once.

mod checkpoint;
mod epoch;
mod layers;
mod params;
mod sequence;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointModel, ModelKind};
pub use epoch::{EpochCmt, EpochForwardOut, SampleTrace};
pub use params::{BnUpdate, BufferId, ParamId, ParamStore};
pub use sequence::{predict_averaged, EpochSignal, SeqForwardOut, SeqSampleTrace, SequenceCmt};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The stride every multi-scale CNN path contracts the signal by; all paths
/// tile the epoch into windows of this many samples (0.5 s at 100 Hz).
pub const WINDOW_SAMPLES: usize = 50;

/// Architecture hyper-parameters shared by both models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding dimension E.
    pub embed_dim: usize,
    /// Hidden width of the feed-forward blocks.
    pub ff_dim: usize,
    /// Attention head count; must divide `embed_dim`.
    pub heads: usize,
    /// Ordered input modalities, by processed-dataset channel name.
    pub modalities: Vec<String>,
    /// Epochs per sequence-model input (L).
    pub seq_len: usize,
    /// Stacked attention blocks per intra-modal / cross-modal / inter-epoch stage.
    pub blocks_per_attention: usize,
    /// Negative slope of every LeakyReLU.
    pub leaky_slope: f64,
    /// Output classes; fixed at 5 (W, N1, N2, N3, REM).
    pub num_classes: usize,
    /// Samples per 30 s epoch (100 Hz x 30 s).
    pub epoch_samples: usize,
    /// Output channels of each CNN path; `None` resolves to `3 * embed_dim / 2`.
    pub cnn_path_channels: Option<usize>,
    /// Running-statistics momentum for batch normalization.
    pub bn_momentum: f64,
    /// Epsilon for layer and batch normalization.
    pub norm_eps: f64,
    /// Add sinusoidal positional encodings over the L sequence positions.
    pub inter_epoch_pos_enc: bool,
    /// Share one epoch-level block across all L positions instead of giving
    /// each position its own weights.
    pub tie_epoch_blocks: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            ff_dim: 512,
            heads: 8,
            modalities: vec!["EEG Fpz-Cz".to_string(), "EOG horizontal".to_string()],
            seq_len: 5,
            blocks_per_attention: 1,
            leaky_slope: 0.01,
            num_classes: 5,
            epoch_samples: 3000,
            cnn_path_channels: None,
            bn_momentum: 0.1,
            norm_eps: 1e-5,
            inter_epoch_pos_enc: true,
            tie_epoch_blocks: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embed_dim must be positive and even (positional encoding), got {}",
                self.embed_dim
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        if self.num_classes != 5 {
            return Err(Error::Config(format!(
                "num_classes is fixed at 5, got {}",
                self.num_classes
            )));
        }
        if self.epoch_samples == 0 || self.epoch_samples % WINDOW_SAMPLES != 0 {
            return Err(Error::Config(format!(
                "epoch_samples must be a positive multiple of {} so all CNN paths align, got {}",
                WINDOW_SAMPLES, self.epoch_samples
            )));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be at least 1".into()));
        }
        if self.blocks_per_attention == 0 {
            return Err(Error::Config("blocks_per_attention must be at least 1".into()));
        }
        if self.ff_dim == 0 {
            return Err(Error::Config("ff_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "bn_momentum must be in [0, 1], got {}",
                self.bn_momentum
            )));
        }
        Ok(())
    }

    /// Per-path CNN output channels.
    pub fn path_channels(&self) -> usize {
        self.cnn_path_channels.unwrap_or(3 * self.embed_dim / 2)
    }

    /// Number of 0.5 s windows per epoch (the CNN output length).
    pub fn n_windows(&self) -> usize {
        self.epoch_samples / WINDOW_SAMPLES
    }

    /// A minimal valid configuration for finite-difference verification.
    pub fn tiny_for_gradcheck() -> Self {
        Self {
            embed_dim: 8,
            ff_dim: 16,
            heads: 2,
            modalities: vec!["eeg".to_string(), "eog".to_string()],
            seq_len: 2,
            epoch_samples: 100,
            cnn_path_channels: Some(4),
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_dims() {
        let mut cfg = ModelConfig::default();
        cfg.embed_dim = 127;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default();
        cfg.heads = 7;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default();
        cfg.modalities.clear();
        assert!(cfg.validate().is_err());

        // halved input length is still stride-aligned; a non-multiple is not
        let mut cfg = ModelConfig::default();
        cfg.epoch_samples = 1501;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_path_channels_resolve() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.path_channels(), 192);
        assert_eq!(cfg.n_windows(), 60);
    }
}
