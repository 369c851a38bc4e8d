//! The epoch cross-modal transformer: one-to-one sleep stage classification.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

use super::layers::{
    check_signal_batch, classifier_init, eps, leaky, Ctx, EpochBlock, FeedForwardLayer,
};
use super::params::{BnUpdate, ParamId, ParamStore};
use super::ModelConfig;

/// Cached per-sample representations needed by the interpretability scores.
pub struct SampleTrace {
    /// Intra-modal attention block output per modality, `[n_windows + 1, E]`.
    pub intra_out: Vec<Var>,
    /// Cross-modal attention block output, `[modalities + 1, E]`.
    pub cross_out: Var,
}

/// Output of one epoch-model forward pass.
pub struct EpochForwardOut<F> {
    /// `[B, 5]` classification logits.
    pub logits: Var,
    /// Pending running-statistics updates (train mode only); apply with
    /// [`EpochCmt::apply_bn_updates`].
    pub bn_updates: Vec<BnUpdate<F>>,
    /// Every attention weight matrix from the pass.
    pub head_weights: Vec<Var>,
    /// Interpretability cache, one entry per batch sample.
    pub trace: Vec<SampleTrace>,
}

pub struct EpochCmt<F> {
    config: ModelConfig,
    store: ParamStore<F>,
    block: EpochBlock,
    ff: Vec<FeedForwardLayer>,
    classifier: (ParamId, ParamId),
}

impl<F: Scalar> EpochCmt<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = EpochBlock::new(&mut store, &mut rng, "epoch", config);
        let e = config.embed_dim;
        let ff = (0..config.modalities.len())
            .map(|mi| {
                FeedForwardLayer::new(&mut store, &mut rng, &format!("epoch.mod{mi}.ff"), e, config.ff_dim)
            })
            .collect();
        let classifier = classifier_init(
            &mut store,
            &mut rng,
            "epoch.classifier",
            config.modalities.len() * e,
            config.num_classes,
        );
        Ok(Self {
            config: config.clone(),
            store,
            block,
            ff,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// Exact count of learnable scalars, CLS vectors and norm affines included.
    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Forward over `[B, T, M]` signals with parameters already on the tape
    /// (slot `i` of `vars` holds `ParamId(i)`). Train mode uses batch
    /// statistics and reports them in the output; eval mode reads the stored
    /// running statistics and mutates nothing.
    pub fn forward_with_params(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        signals: &Tensor<F>,
        train: bool,
    ) -> Result<EpochForwardOut<F>> {
        check_signal_batch(signals, &self.config)?;
        let mut bn_updates = Vec::new();
        let mut head_weights = Vec::new();
        let mut ctx = Ctx {
            tape,
            vars,
            store: &self.store,
            train,
            bn_updates: &mut bn_updates,
            head_weights: &mut head_weights,
            leaky_slope: leaky(&self.config),
            norm_eps: eps(&self.config),
            heads: self.config.heads,
        };

        let cores = self.block.forward(&mut ctx, signals, &self.config)?;
        let n_windows = self.config.n_windows();

        // Classification tail: substitute CLS_cross for each modality's CLS
        // slot, run the per-modality feed-forward, then classify the
        // concatenated CLS_cross-position vectors.
        let mut logit_rows = Vec::with_capacity(cores.len());
        let mut trace = Vec::with_capacity(cores.len());
        for core in &cores {
            let mut pieces = Vec::with_capacity(self.ff.len());
            for (mi, ff) in self.ff.iter().enumerate() {
                let windows = ctx.tape.slice_rows(core.intra_out[mi], 1, n_windows)?;
                let substituted = ctx.tape.concat_rows(&[core.cross_cls, windows])?;
                let ffed = ff.forward(&mut ctx, substituted)?;
                let head = ctx.tape.slice_rows(ffed, 0, 1)?;
                pieces.push(head);
            }
            let flat = ctx.tape.concat_cols(&pieces)?;
            let logits = crate::nn::linear(
                ctx.tape,
                flat,
                ctx.vars[self.classifier.0 .0],
                ctx.vars[self.classifier.1 .0],
            )?;
            logit_rows.push(logits);
            trace.push(SampleTrace {
                intra_out: core.intra_out.clone(),
                cross_out: core.cross_out,
            });
        }
        let logits = ctx.tape.concat_rows(&logit_rows)?;
        Ok(EpochForwardOut {
            logits,
            bn_updates,
            head_weights,
            trace,
        })
    }

    /// Forward that injects this model's parameters onto the tape first.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        signals: &Tensor<F>,
        train: bool,
    ) -> Result<(EpochForwardOut<F>, Vec<Var>)> {
        let vars = self.store.inject(tape);
        let out = self.forward_with_params(tape, &vars, signals, train)?;
        Ok((out, vars))
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<F>]) {
        let momentum = self.config.bn_momentum;
        self.store.apply_bn_updates(updates, momentum);
    }

    /// Eval-mode multi-scale CNN features for one modality: `[B, T, 1]` (or
    /// `[T, 1]`) mapped to `[B, T/50, E]` windows.
    pub fn multiscale_features(
        &self,
        tape: &mut Tape<F>,
        modality: usize,
        x: &Tensor<F>,
    ) -> Result<Var> {
        let x3 = match x.shape() {
            [t, 1] => x.clone().reshaped(&[1, *t, 1])?,
            [_, _, 1] => x.clone(),
            s => {
                return Err(crate::error::Error::Shape(format!(
                    "expected [T, 1] or [B, T, 1] single-channel input, got {:?}",
                    s
                )))
            }
        };
        if x3.shape()[1] != self.config.epoch_samples {
            return Err(crate::error::Error::Input(format!(
                "input length {} does not match the configured {} samples",
                x3.shape()[1],
                self.config.epoch_samples
            )));
        }
        let vars = self.store.inject(tape);
        let mut bn_updates = Vec::new();
        let mut head_weights = Vec::new();
        let mut ctx = Ctx {
            tape,
            vars: &vars,
            store: &self.store,
            train: false,
            bn_updates: &mut bn_updates,
            head_weights: &mut head_weights,
            leaky_slope: leaky(&self.config),
            norm_eps: eps(&self.config),
            heads: self.config.heads,
        };
        let leaf = ctx.tape.leaf(x3);
        self.block.cnn[modality].forward(&mut ctx, leaf)
    }

    /// Eval-mode class probabilities for a signal batch, softmaxed per row.
    pub fn predict_probs(&self, signals: &Tensor<F>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, signals, false)?;
        let logits = tape.value(out.logits);
        let (rows, cols) = logits.dims2()?;
        let mut probs = Vec::with_capacity(rows);
        for r in 0..rows {
            let row: Vec<f64> = logits.row(r).iter().map(|v| v.to_f64().unwrap()).collect();
            probs.push(crate::tensor::softmax(&row));
        }
        let _ = cols;
        Ok(probs)
    }
}
