//! The sequence cross-modal transformer: many-to-many classification over L
//! consecutive epochs, plus mean-probability inference over sliding windows.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::exec;
use crate::nn;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

use super::layers::{classifier_init, eps, leaky, Ctx, EpochBlock, FeedForwardLayer, SampleCore};
use super::params::{BnUpdate, ParamId, ParamStore};
use super::{ModelConfig, SampleTrace};

/// Interpretability cache for one sequence in the batch.
pub struct SeqSampleTrace {
    /// Per-position epoch caches (intra-modal and cross-modal outputs).
    pub epochs: Vec<SampleTrace>,
    /// Inter-epoch block input `[L, E]` (after positional encoding when enabled).
    pub inter_input: Var,
}

pub struct SeqForwardOut<F> {
    /// `[B * L, 5]` logits, rows ordered (sequence, position).
    pub logits: Var,
    pub bn_updates: Vec<BnUpdate<F>>,
    pub head_weights: Vec<Var>,
    pub trace: Vec<SeqSampleTrace>,
}

pub struct SequenceCmt<F> {
    config: ModelConfig,
    store: ParamStore<F>,
    /// One epoch-level block per position, or a single shared block when
    /// `tie_epoch_blocks` is set.
    blocks: Vec<EpochBlock>,
    inter: Vec<super::layers::AttentionBlockLayer>,
    ff: FeedForwardLayer,
    head: (ParamId, ParamId),
}

impl<F: Scalar> SequenceCmt<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n_blocks = if config.tie_epoch_blocks {
            1
        } else {
            config.seq_len
        };
        let blocks = (0..n_blocks)
            .map(|i| EpochBlock::new(&mut store, &mut rng, &format!("seq.pos{i}"), config))
            .collect();
        let e = config.embed_dim;
        let inter = (0..config.blocks_per_attention)
            .map(|bi| {
                super::layers::AttentionBlockLayer::new(
                    &mut store,
                    &mut rng,
                    &format!("seq.inter{bi}"),
                    e,
                )
            })
            .collect();
        let ff = FeedForwardLayer::new(&mut store, &mut rng, "seq.ff", e, config.ff_dim);
        let head = classifier_init(&mut store, &mut rng, "seq.head", e, config.num_classes);
        Ok(Self {
            config: config.clone(),
            store,
            blocks,
            inter,
            ff,
            head,
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

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    fn block_for(&self, position: usize) -> &EpochBlock {
        if self.config.tie_epoch_blocks {
            &self.blocks[0]
        } else {
            &self.blocks[position]
        }
    }

    /// Forward over `[B, L, T, M]` sequence signals with parameters already on
    /// the tape. Logit rows come out ordered (sequence, position).
    pub fn forward_with_params(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        signals: &Tensor<F>,
        train: bool,
    ) -> Result<SeqForwardOut<F>> {
        let shape = signals.shape();
        let (batch, l, t, m) = match shape {
            [b, l, t, m] => (*b, *l, *t, *m),
            s => {
                return Err(Error::Shape(format!(
                    "sequence forward expects [B, L, T, M], got {:?}",
                    s
                )))
            }
        };
        if l != self.config.seq_len {
            return Err(Error::Input(format!(
                "sequence length {} does not match configured L = {}",
                l, self.config.seq_len
            )));
        }
        if t != self.config.epoch_samples || m != self.config.modalities.len() {
            return Err(Error::Input(format!(
                "epoch shape [{}, {}] does not match configured [{}, {}]",
                t,
                m,
                self.config.epoch_samples,
                self.config.modalities.len()
            )));
        }

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

        // Epoch-level cores per position; each position's block sees the whole
        // batch at that position so its batch norm has batch statistics.
        let mut cores: Vec<Vec<SampleCore>> = Vec::with_capacity(l);
        let epoch_len = t * m;
        for li in 0..l {
            let mut pos_signals = vec![F::zero(); batch * epoch_len];
            for b in 0..batch {
                let src = (b * l + li) * epoch_len;
                pos_signals[b * epoch_len..(b + 1) * epoch_len]
                    .copy_from_slice(&signals.data()[src..src + epoch_len]);
            }
            let pos_tensor = Tensor::new(vec![batch, t, m], pos_signals)?;
            cores.push(self.block_for(li).forward(&mut ctx, &pos_tensor, &self.config)?);
        }

        let e = self.config.embed_dim;
        let pe = if self.config.inter_epoch_pos_enc {
            Some(ctx.tape.leaf(nn::positional_encoding::<F>(l, e)?))
        } else {
            None
        };

        let mut logit_rows = Vec::with_capacity(batch * l);
        let mut trace = Vec::with_capacity(batch);
        for b in 0..batch {
            let cls_rows: Vec<Var> = (0..l).map(|li| cores[li][b].cross_cls).collect();
            let stacked = ctx.tape.concat_rows(&cls_rows)?;
            let inter_input = match pe {
                Some(pe) => ctx.tape.add(stacked, pe)?,
                None => stacked,
            };
            let mut h = inter_input;
            for block in &self.inter {
                h = block.forward(&mut ctx, h)?;
            }
            let h = self.ff.forward(&mut ctx, h)?;
            for li in 0..l {
                let row = ctx.tape.slice_rows(h, li, 1)?;
                let logits = nn::linear(
                    ctx.tape,
                    row,
                    ctx.vars[self.head.0 .0],
                    ctx.vars[self.head.1 .0],
                )?;
                logit_rows.push(logits);
            }
            trace.push(SeqSampleTrace {
                epochs: (0..l)
                    .map(|li| SampleTrace {
                        intra_out: cores[li][b].intra_out.clone(),
                        cross_out: cores[li][b].cross_out,
                    })
                    .collect(),
                inter_input,
            });
        }
        let logits = ctx.tape.concat_rows(&logit_rows)?;
        Ok(SeqForwardOut {
            logits,
            bn_updates,
            head_weights,
            trace,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        signals: &Tensor<F>,
        train: bool,
    ) -> Result<(SeqForwardOut<F>, Vec<Var>)> {
        let vars = self.store.inject(tape);
        let out = self.forward_with_params(tape, &vars, signals, train)?;
        Ok((out, vars))
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<F>]) {
        let momentum = self.config.bn_momentum;
        self.store.apply_bn_updates(updates, momentum);
    }

    /// Eval-mode per-position probabilities for a batch of sequences,
    /// `[B][L][5]`, each row softmaxed.
    pub fn predict_probs(&self, signals: &Tensor<F>) -> Result<Vec<Vec<Vec<f64>>>> {
        let (batch, l) = match signals.shape() {
            [b, l, _, _] => (*b, *l),
            s => {
                return Err(Error::Shape(format!(
                    "sequence predict expects [B, L, T, M], got {:?}",
                    s
                )))
            }
        };
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, signals, false)?;
        let logits = tape.value(out.logits);
        let mut probs = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut per_pos = Vec::with_capacity(l);
            for li in 0..l {
                let row: Vec<f64> = logits
                    .row(b * l + li)
                    .iter()
                    .map(|v| v.to_f64().unwrap())
                    .collect();
                per_pos.push(crate::tensor::softmax(&row));
            }
            probs.push(per_pos);
        }
        Ok(probs)
    }
}

/// One epoch's signals for sliding-window inference.
#[derive(Clone, Copy)]
pub struct EpochSignal<'a, F> {
    /// Original hypnogram index; gaps break window contiguity.
    pub orig_index: usize,
    /// `epoch_samples * modalities` values, `[T, C]` row-major.
    pub samples: &'a [F],
}

/// Mean-probability inference over every stride-1 window of a recording.
///
/// Each epoch's probability vector is the arithmetic mean of the softmaxed
/// logits over all windows containing it; epochs inside contiguous runs
/// shorter than L get `None`. Windows are independent and evaluated on
/// per-worker tapes against the read-only model.
pub fn predict_averaged<F: Scalar>(
    model: &SequenceCmt<F>,
    epochs: &[EpochSignal<'_, F>],
) -> Result<Vec<Option<Vec<f64>>>> {
    let l = model.config.seq_len;
    let t = model.config.epoch_samples;
    let m = model.config.modalities.len();
    if epochs.len() < l {
        return Err(Error::Input(format!(
            "recording has {} epochs, fewer than the sequence length {}",
            epochs.len(),
            l
        )));
    }
    for (i, ep) in epochs.iter().enumerate() {
        if ep.samples.len() != t * m {
            return Err(Error::Input(format!(
                "epoch {} has {} samples, expected {}",
                i,
                ep.samples.len(),
                t * m
            )));
        }
    }

    // Contiguous runs by original hypnogram index.
    let mut runs: Vec<(usize, usize)> = Vec::new(); // (start, len) into `epochs`
    let mut start = 0usize;
    for i in 1..=epochs.len() {
        let broke = i == epochs.len()
            || epochs[i].orig_index != epochs[i - 1].orig_index + 1;
        if broke {
            runs.push((start, i - start));
            start = i;
        }
    }

    let mut window_starts: Vec<usize> = Vec::new();
    for &(run_start, run_len) in &runs {
        if run_len < l {
            log::warn!(
                "event=sequence_run_skipped start={} len={} needed={}",
                run_start,
                run_len,
                l
            );
            continue;
        }
        window_starts.extend(run_start..=run_start + run_len - l);
    }

    // Evaluate windows in parallel; accumulate deterministically afterwards.
    let per_window: Vec<Result<Vec<Vec<f64>>>> = exec::map_collect(&window_starts, |&s| {
        let mut data = vec![F::zero(); l * t * m];
        for li in 0..l {
            data[li * t * m..(li + 1) * t * m].copy_from_slice(epochs[s + li].samples);
        }
        let tensor = Tensor::new(vec![1, l, t, m], data)?;
        let probs = model.predict_probs(&tensor)?;
        Ok(probs.into_iter().next().unwrap())
    });

    let k = model.config.num_classes;
    let mut sums = vec![vec![0.0f64; k]; epochs.len()];
    let mut counts = vec![0usize; epochs.len()];
    for (&s, window) in window_starts.iter().zip(per_window) {
        let window = window?;
        for (li, probs) in window.iter().enumerate() {
            for (j, &p) in probs.iter().enumerate() {
                sums[s + li][j] += p;
            }
            counts[s + li] += 1;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(sum, count)| {
            if count == 0 {
                None
            } else {
                Some(sum.into_iter().map(|v| v / count as f64).collect())
            }
        })
        .collect())
}
