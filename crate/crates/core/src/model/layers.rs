//! Layer definitions: parameter registration plus tape-forward logic.

use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::nn::{self, MhaVars};
use crate::tape::{Tape, Var};
use crate::tensor::{sc, Scalar, Tensor};

use super::params::{init_he, init_normal, BnUpdate, BufferId, ParamId, ParamStore};
use super::ModelConfig;

/// Everything one forward pass threads through the layer stack.
pub(crate) struct Ctx<'a, F: Scalar> {
    pub tape: &'a mut Tape<F>,
    pub vars: &'a [Var],
    pub store: &'a ParamStore<F>,
    pub train: bool,
    pub bn_updates: &'a mut Vec<BnUpdate<F>>,
    /// Every attention weight matrix produced so far, for invariant checks.
    pub head_weights: &'a mut Vec<Var>,
    pub leaky_slope: F,
    pub norm_eps: F,
    pub heads: usize,
}

impl<'a, F: Scalar> Ctx<'a, F> {
    fn v(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

pub(crate) struct Conv1dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv1dLayer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha20Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let w = store.add_param(
            format!("{name}.w"),
            init_he(rng, &[c_out, c_in, kernel], c_in * kernel),
        );
        let b = store.add_param(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self { w, b, stride }
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        ctx.tape.conv1d(x, ctx.v(self.w), ctx.v(self.b), self.stride)
    }
}

pub(crate) struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub seen: BufferId,
}

impl BatchNormLayer {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let gamma = store.add_param(format!("{name}.gamma"), Tensor::full(&[channels], F::one()));
        let beta = store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let running_mean =
            store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = store.add_buffer(
            format!("{name}.running_var"),
            Tensor::full(&[channels], F::one()),
        );
        let seen = store.add_buffer(format!("{name}.seen_batches"), Tensor::zeros(&[1]));
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            seen,
        }
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        if ctx.train {
            let (out, stats) =
                ctx.tape
                    .batch_norm_train(x, ctx.v(self.gamma), ctx.v(self.beta), ctx.norm_eps)?;
            ctx.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                seen: self.seen,
                stats,
            });
            Ok(out)
        } else {
            if ctx.store.buffer(self.seen).data()[0] == F::zero() {
                log::warn!(
                    "event=batch_norm_uninitialized detail=\"eval before any training step; using identity statistics\""
                );
            }
            ctx.tape.batch_norm_eval(
                x,
                ctx.v(self.gamma),
                ctx.v(self.beta),
                ctx.store.buffer(self.running_mean).data(),
                ctx.store.buffer(self.running_var).data(),
                ctx.norm_eps,
            )
        }
    }
}

/// conv -> LeakyReLU -> batch norm, the unit every CNN path is built from.
pub(crate) struct ConvUnit {
    conv: Conv1dLayer,
    bn: BatchNormLayer,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha20Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: Conv1dLayer::new(store, rng, &format!("{name}.conv"), c_in, c_out, kernel, stride),
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), c_out),
        }
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let slope = ctx.leaky_slope;
        let a = ctx.tape.leaky_relu(y, slope)?;
        self.bn.forward(ctx, a)
    }
}

/// Three parallel CNN paths over non-overlapping windows plus a 1x1 fuse conv.
///
/// Kernel sizes follow the three scales (50 | 25,2 | 5,5,2); every conv uses
/// stride == kernel so each path tiles the epoch into the same 0.5 s windows.
pub(crate) struct MultiScaleCnn {
    paths: Vec<Vec<ConvUnit>>,
    fuse: ConvUnit,
}

impl MultiScaleCnn {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha20Rng,
        name: &str,
        config: &ModelConfig,
    ) -> Self {
        let w = config.path_channels();
        let e = config.embed_dim;
        let path_specs: [&[(usize, usize)]; 3] = [
            &[(50, 50)],
            &[(25, 25), (2, 2)],
            &[(5, 5), (5, 5), (2, 2)],
        ];
        let mut paths = Vec::with_capacity(3);
        for (pi, spec) in path_specs.iter().enumerate() {
            let mut units = Vec::with_capacity(spec.len());
            let mut c_in = 1usize;
            for (ui, &(kernel, stride)) in spec.iter().enumerate() {
                units.push(ConvUnit::new(
                    store,
                    rng,
                    &format!("{name}.path{pi}.{ui}"),
                    c_in,
                    w,
                    kernel,
                    stride,
                ));
                c_in = w;
            }
            paths.push(units);
        }
        let fuse = ConvUnit::new(store, rng, &format!("{name}.fuse"), 3 * w, e, 1, 1);
        Self { paths, fuse }
    }

    /// `[B, T, 1] -> [B, T/50, E]`.
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let (batch, _, _) = ctx.tape.value(x).dims3()?;
        let mut outs = Vec::with_capacity(self.paths.len());
        let mut n_windows = 0;
        let mut width = 0;
        for units in &self.paths {
            let mut h = x;
            for unit in units {
                h = unit.forward(ctx, h)?;
            }
            let (_, t, c) = ctx.tape.value(h).dims3()?;
            n_windows = t;
            width = c;
            outs.push(ctx.tape.reshape(h, &[batch * t, c])?);
        }
        let merged = ctx.tape.concat_cols(&outs)?;
        let merged3 = ctx
            .tape
            .reshape(merged, &[batch, n_windows, width * self.paths.len()])?;
        self.fuse.forward(ctx, merged3)
    }
}

pub(crate) struct MhaParamIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl MhaParamIds {
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha20Rng,
        name: &str,
        e: usize,
    ) -> Self {
        let std = (1.0 / e as f64).sqrt();
        let mut proj = |suffix: &str, rng: &mut ChaCha20Rng| {
            let w = store.add_param(format!("{name}.{suffix}.w"), init_normal(rng, &[e, e], std));
            let b = store.add_param(format!("{name}.{suffix}.b"), Tensor::zeros(&[e]));
            (w, b)
        };
        let (wq, bq) = proj("q", rng);
        let (wk, bk) = proj("k", rng);
        let (wv, bv) = proj("v", rng);
        let (wo, bo) = proj("out", rng);
        Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn vars<F: Scalar>(&self, ctx: &Ctx<F>) -> MhaVars {
        MhaVars {
            wq: ctx.v(self.wq),
            bq: ctx.v(self.bq),
            wk: ctx.v(self.wk),
            bk: ctx.v(self.bk),
            wv: ctx.v(self.wv),
            bv: ctx.v(self.bv),
            wo: ctx.v(self.wo),
            bo: ctx.v(self.bo),
        }
    }
}

/// Multi-head self-attention followed by residual addition and layer norm.
pub(crate) struct AttentionBlockLayer {
    mha: MhaParamIds,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

impl AttentionBlockLayer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha20Rng,
        name: &str,
        e: usize,
    ) -> Self {
        let mha = MhaParamIds::new(store, rng, &format!("{name}.mha"), e);
        let ln_gamma = store.add_param(format!("{name}.ln.gamma"), Tensor::full(&[e], F::one()));
        let ln_beta = store.add_param(format!("{name}.ln.beta"), Tensor::zeros(&[e]));
        Self {
            mha,
            ln_gamma,
            ln_beta,
        }
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let params = self.mha.vars(ctx);
        let heads = ctx.heads;
        let out = nn::multi_head_attention(ctx.tape, x, x, x, &params, heads)?;
        ctx.head_weights.extend(out.head_weights);
        let res = ctx.tape.add(x, out.out)?;
        ctx.tape
            .layer_norm(res, ctx.v(self.ln_gamma), ctx.v(self.ln_beta), ctx.norm_eps)
    }
}

/// Position-wise feed-forward followed by residual addition and layer norm.
pub(crate) struct FeedForwardLayer {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln_gamma: ParamId,
    ln_beta: ParamId,
}

impl FeedForwardLayer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha20Rng,
        name: &str,
        e: usize,
        hidden: usize,
    ) -> Self {
        let w1 = store.add_param(format!("{name}.w1"), init_he(rng, &[e, hidden], e));
        let b1 = store.add_param(format!("{name}.b1"), Tensor::zeros(&[hidden]));
        let w2 = store.add_param(format!("{name}.w2"), init_he(rng, &[hidden, e], hidden));
        let b2 = store.add_param(format!("{name}.b2"), Tensor::zeros(&[e]));
        let ln_gamma = store.add_param(format!("{name}.ln.gamma"), Tensor::full(&[e], F::one()));
        let ln_beta = store.add_param(format!("{name}.ln.beta"), Tensor::zeros(&[e]));
        Self {
            w1,
            b1,
            w2,
            b2,
            ln_gamma,
            ln_beta,
        }
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, x: Var) -> Result<Var> {
        let h = nn::linear(ctx.tape, x, ctx.v(self.w1), ctx.v(self.b1))?;
        let slope = ctx.leaky_slope;
        let a = ctx.tape.leaky_relu(h, slope)?;
        let y = nn::linear(ctx.tape, a, ctx.v(self.w2), ctx.v(self.b2))?;
        let res = ctx.tape.add(x, y)?;
        ctx.tape
            .layer_norm(res, ctx.v(self.ln_gamma), ctx.v(self.ln_beta), ctx.norm_eps)
    }
}

/// One epoch-level core: per-modality CNN + CLS + intra-modal attention, then
/// cross-modal attention over the stacked CLS representations.
pub(crate) struct EpochBlock {
    pub cnn: Vec<MultiScaleCnn>,
    pub cls: Vec<ParamId>,
    pub intra: Vec<Vec<AttentionBlockLayer>>,
    pub cls_cross: ParamId,
    pub cross: Vec<AttentionBlockLayer>,
}

/// Per-sample outputs of the epoch-level core.
pub(crate) struct SampleCore {
    /// Post-attention representation per modality, `[n_windows + 1, E]`.
    pub intra_out: Vec<Var>,
    /// Cross-modal block output, `[modalities + 1, E]`; row 0 is CLS_cross.
    pub cross_out: Var,
    /// Row 0 of `cross_out`, `[1, E]`.
    pub cross_cls: Var,
}

impl EpochBlock {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha20Rng,
        name: &str,
        config: &ModelConfig,
    ) -> Self {
        let e = config.embed_dim;
        let mut cnn = Vec::new();
        let mut cls = Vec::new();
        let mut intra = Vec::new();
        for (mi, _) in config.modalities.iter().enumerate() {
            cnn.push(MultiScaleCnn::new(
                store,
                rng,
                &format!("{name}.mod{mi}.cnn"),
                config,
            ));
            cls.push(store.add_param(
                format!("{name}.mod{mi}.cls"),
                init_normal(rng, &[1, e], 0.02),
            ));
            let blocks = (0..config.blocks_per_attention)
                .map(|bi| {
                    AttentionBlockLayer::new(store, rng, &format!("{name}.mod{mi}.intra{bi}"), e)
                })
                .collect();
            intra.push(blocks);
        }
        let cls_cross =
            store.add_param(format!("{name}.cls_cross"), init_normal(rng, &[1, e], 0.02));
        let cross = (0..config.blocks_per_attention)
            .map(|bi| AttentionBlockLayer::new(store, rng, &format!("{name}.cross{bi}"), e))
            .collect();
        Self {
            cnn,
            cls,
            intra,
            cls_cross,
            cross,
        }
    }

    /// Run the core on a batch of epoch signals `[B, T, M]` ([T, C] row-major
    /// per sample).
    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut Ctx<F>,
        signals: &Tensor<F>,
        config: &ModelConfig,
    ) -> Result<Vec<SampleCore>> {
        let (batch, t, m) = signals.dims3()?;
        let n_windows = config.n_windows();
        let e = config.embed_dim;

        // Per modality: extract the channel, run the CNN over the whole batch
        // (batch norm sees batch statistics), then split per sample.
        let mut intra_per_modality: Vec<Vec<Var>> = Vec::with_capacity(m);
        let pe_const = ctx
            .tape
            .leaf(nn::positional_encoding::<F>(n_windows + 1, e)?);
        for mi in 0..m {
            let mut chan = vec![F::zero(); batch * t];
            for b in 0..batch {
                for i in 0..t {
                    chan[b * t + i] = signals.data()[(b * t + i) * m + mi];
                }
            }
            let x = ctx.tape.leaf(Tensor::new(vec![batch, t, 1], chan)?);
            let feats = self.cnn[mi].forward(ctx, x)?; // [B, W, E]
            let flat = ctx.tape.reshape(feats, &[batch * n_windows, e])?;

            let mut per_sample = Vec::with_capacity(batch);
            for b in 0..batch {
                let windows = ctx.tape.slice_rows(flat, b * n_windows, n_windows)?;
                let with_cls = ctx.tape.concat_rows(&[ctx.vars[self.cls[mi].0], windows])?;
                let mut h = ctx.tape.add(with_cls, pe_const)?;
                for block in &self.intra[mi] {
                    h = block.forward(ctx, h)?;
                }
                per_sample.push(h);
            }
            intra_per_modality.push(per_sample);
        }

        // Cross-modal stage per sample: CLS_cross stacked over the extracted
        // per-modality CLS representations (row 0 of each intra output).
        let mut cores = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut rows = Vec::with_capacity(m + 1);
            rows.push(ctx.vars[self.cls_cross.0]);
            for mi in 0..m {
                let cls_repr = ctx.tape.slice_rows(intra_per_modality[mi][b], 0, 1)?;
                rows.push(cls_repr);
            }
            let mut h = ctx.tape.concat_rows(&rows)?;
            for block in &self.cross {
                h = block.forward(ctx, h)?;
            }
            let cross_cls = ctx.tape.slice_rows(h, 0, 1)?;
            cores.push(SampleCore {
                intra_out: intra_per_modality.iter().map(|v| v[b]).collect(),
                cross_out: h,
                cross_cls,
            });
        }
        Ok(cores)
    }
}

/// Shared scale for classifier initialization.
pub(crate) fn classifier_init<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha20Rng,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) -> (ParamId, ParamId) {
    let bound = (1.0 / in_dim as f64).sqrt();
    let w = store.add_param(
        format!("{name}.w"),
        super::params::init_uniform(rng, &[in_dim, out_dim], bound),
    );
    let b = store.add_param(format!("{name}.b"), Tensor::zeros(&[out_dim]));
    (w, b)
}

/// Validate a `[B, T, M]` signal batch against the configuration.
pub(crate) fn check_signal_batch<F: Scalar>(
    signals: &Tensor<F>,
    config: &ModelConfig,
) -> Result<()> {
    let (_, t, m) = signals.dims3()?;
    if t != config.epoch_samples {
        return Err(crate::error::Error::Input(format!(
            "epoch length {} does not match the configured {} samples",
            t, config.epoch_samples
        )));
    }
    if m != config.modalities.len() {
        return Err(crate::error::Error::Input(format!(
            "{} signal channels for {} configured modalities",
            m,
            config.modalities.len()
        )));
    }
    Ok(())
}

pub(crate) fn leaky<F: Scalar>(config: &ModelConfig) -> F {
    sc(config.leaky_slope)
}

pub(crate) fn eps<F: Scalar>(config: &ModelConfig) -> F {
    sc(config.norm_eps)
}
