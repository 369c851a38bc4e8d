//! Forward-pass invariants of the epoch and sequence models: shapes,
//! attention row sums, determinism, eval purity, gradient flow, and the
//! symmetry/equivariance oracles.

use cmt_core::model::{EpochCmt, ModelConfig, SequenceCmt};
use cmt_core::tape::Tape;
use cmt_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        ff_dim: 32,
        heads: 4,
        cnn_path_channels: Some(8),
        modalities: vec!["eeg".into(), "eog".into()],
        seq_len: 3,
        epoch_samples: 300,
        ..ModelConfig::default()
    }
}

fn random_signals(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<f32> {
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn epoch_logits_shape_and_row_stochastic_attention() {
    let cfg = small_config();
    let model = EpochCmt::<f32>::new(&cfg, 5).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let signals = random_signals(&mut rng, &[3, 300, 2]);
    let mut tape = Tape::new();
    let (out, _) = model.forward(&mut tape, &signals, false).unwrap();
    assert_eq!(tape.value(out.logits).shape(), &[3, 5]);
    assert!(!out.head_weights.is_empty());
    for &w in &out.head_weights {
        let t = tape.value(w);
        let (rows, cols) = t.dims2().unwrap();
        for r in 0..rows {
            let sum: f32 = t.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sum {sum} ({rows}x{cols})");
        }
    }
}

#[test]
fn multiscale_cnn_maps_3000_to_60_windows() {
    let mut cfg = small_config();
    cfg.epoch_samples = 3000;
    let model = EpochCmt::<f32>::new(&cfg, 5).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let signals = random_signals(&mut rng, &[1, 3000, 2]);
    let mut tape = Tape::new();
    let (out, _) = model.forward(&mut tape, &signals, false).unwrap();
    // 3000 samples -> 60 windows + 1 CLS row in the cached intra output.
    let intra = tape.value(out.trace[0].intra_out[0]);
    assert_eq!(intra.shape(), &[61, cfg.embed_dim]);
}

#[test]
fn epoch_forward_rejects_wrong_length() {
    let cfg = small_config();
    let model = EpochCmt::<f32>::new(&cfg, 5).unwrap();
    let signals = Tensor::<f32>::zeros(&[1, 150, 2]);
    let mut tape = Tape::new();
    assert!(model.forward(&mut tape, &signals, false).is_err());
}

#[test]
fn epoch_forward_rejects_wrong_channels() {
    let cfg = small_config();
    let model = EpochCmt::<f32>::new(&cfg, 5).unwrap();
    let signals = Tensor::<f32>::zeros(&[1, 300, 3]);
    let mut tape = Tape::new();
    assert!(model.forward(&mut tape, &signals, false).is_err());
}

#[test]
fn eval_forward_is_deterministic_and_pure() {
    let cfg = small_config();
    let model = EpochCmt::<f32>::new(&cfg, 5).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let signals = random_signals(&mut rng, &[2, 300, 2]);
    let buffers_before: Vec<Vec<f32>> = model
        .params()
        .buffers()
        .iter()
        .map(|t| t.data().to_vec())
        .collect();
    let a = model.predict_probs(&signals).unwrap();
    let b = model.predict_probs(&signals).unwrap();
    assert_eq!(a, b);
    let buffers_after: Vec<Vec<f32>> = model
        .params()
        .buffers()
        .iter()
        .map(|t| t.data().to_vec())
        .collect();
    assert_eq!(buffers_before, buffers_after);
}

#[test]
fn epoch_logits_independent_of_other_batch_items() {
    // Eval mode: changing another sample in the batch must not change this
    // sample's logits.
    let cfg = small_config();
    let model = EpochCmt::<f32>::new(&cfg, 5).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let a = random_signals(&mut rng, &[1, 300, 2]);
    let other1 = random_signals(&mut rng, &[1, 300, 2]);
    let other2 = random_signals(&mut rng, &[1, 300, 2]);
    let batch = |x: &Tensor<f32>, y: &Tensor<f32>| {
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        Tensor::new(vec![2, 300, 2], data).unwrap()
    };
    let p1 = model.predict_probs(&batch(&a, &other1)).unwrap();
    let p2 = model.predict_probs(&batch(&a, &other2)).unwrap();
    assert_eq!(p1[0], p2[0]);
}

#[test]
fn gradient_flows_to_every_parameter() {
    let cfg = small_config();
    let model = EpochCmt::<f32>::new(&cfg, 5).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let signals = random_signals(&mut rng, &[4, 300, 2]);
    let labels = vec![0usize, 1, 2, 3];
    let mut tape = Tape::new();
    let (out, vars) = model.forward(&mut tape, &signals, true).unwrap();
    let loss = tape
        .weighted_cross_entropy(out.logits, &labels, &[1.0, 2.0, 1.0, 2.0, 2.0])
        .unwrap();
    tape.backward(loss).unwrap();
    for (i, &v) in vars.iter().enumerate() {
        let g = tape
            .grad(v)
            .unwrap_or_else(|| panic!("no gradient for parameter {}", model.params().names()[i]));
        let max = g.iter().fold(0f32, |a, &b| a.max(b.abs()));
        assert!(
            max > 0.0,
            "zero gradient for parameter {}",
            model.params().names()[i]
        );
    }
}

#[test]
fn identical_modalities_with_copied_weights_agree() {
    // Copy modality-0 weights onto modality 1 and feed the same signal into
    // both channels: the intra-modal CLS outputs must coincide.
    let cfg = small_config();
    let mut model = EpochCmt::<f32>::new(&cfg, 5).unwrap();
    let names: Vec<String> = model.params().names().to_vec();
    for (i, name) in names.iter().enumerate() {
        if let Some(rest) = name.strip_prefix("epoch.mod0.") {
            if rest.starts_with("ff") {
                continue;
            }
            let twin = format!("epoch.mod1.{rest}");
            let j = names.iter().position(|n| n == &twin).unwrap();
            let src = model.params().param_by_index(i).clone();
            *model.params_mut().param_by_index_mut(j) = src;
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let chan = random_signals(&mut rng, &[300, 1]);
    let mut data = vec![0f32; 300 * 2];
    for t in 0..300 {
        data[t * 2] = chan.data()[t];
        data[t * 2 + 1] = chan.data()[t];
    }
    let signals = Tensor::new(vec![1, 300, 2], data).unwrap();
    let mut tape = Tape::new();
    let (out, _) = model.forward(&mut tape, &signals, false).unwrap();
    let m0 = tape.value(out.trace[0].intra_out[0]).row(0).to_vec();
    let m1 = tape.value(out.trace[0].intra_out[1]).row(0).to_vec();
    for (a, b) in m0.iter().zip(&m1) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn sequence_logits_shape() {
    let cfg = small_config();
    let model = SequenceCmt::<f32>::new(&cfg, 5).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let signals = random_signals(&mut rng, &[2, 3, 300, 2]);
    let probs = model.predict_probs(&signals).unwrap();
    assert_eq!(probs.len(), 2);
    assert_eq!(probs[0].len(), 3);
    assert_eq!(probs[0][0].len(), 5);
    for seq in &probs {
        for row in seq {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn sequence_length_one_is_well_defined() {
    let mut cfg = small_config();
    cfg.seq_len = 1;
    let model = SequenceCmt::<f32>::new(&cfg, 5).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let signals = random_signals(&mut rng, &[1, 1, 300, 2]);
    let probs = model.predict_probs(&signals).unwrap();
    let sum: f64 = probs[0][0].iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
}

#[test]
fn tied_blocks_make_epoch_permutation_equivariant() {
    // With a shared epoch block and no inter-epoch positional encoding,
    // permuting the input epochs permutes the inter-epoch block inputs.
    let mut cfg = small_config();
    cfg.tie_epoch_blocks = true;
    cfg.inter_epoch_pos_enc = false;
    let model = SequenceCmt::<f32>::new(&cfg, 5).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let epochs: Vec<Tensor<f32>> = (0..3).map(|_| random_signals(&mut rng, &[300, 2])).collect();

    let build = |order: &[usize]| {
        let mut data = Vec::new();
        for &i in order {
            data.extend_from_slice(epochs[i].data());
        }
        Tensor::new(vec![1, 3, 300, 2], data).unwrap()
    };
    let mut t1 = Tape::new();
    let (o1, _) = model.forward(&mut t1, &build(&[0, 1, 2]), false).unwrap();
    let mut t2 = Tape::new();
    let (o2, _) = model.forward(&mut t2, &build(&[2, 0, 1]), false).unwrap();
    let a = t1.value(o1.trace[0].inter_input);
    let b = t2.value(o2.trace[0].inter_input);
    // Row l of the permuted input equals row perm[l] of the original.
    let perm = [2usize, 0, 1];
    for l in 0..3 {
        for e in 0..cfg.embed_dim {
            let va = a.row(perm[l])[e];
            let vb = b.row(l)[e];
            assert!((va - vb).abs() < 1e-5, "row {l} dim {e}: {va} vs {vb}");
        }
    }
}

#[test]
fn untied_default_has_per_position_blocks() {
    let cfg = small_config();
    let tied = {
        let mut c = cfg.clone();
        c.tie_epoch_blocks = true;
        SequenceCmt::<f32>::new(&c, 5).unwrap()
    };
    let untied = SequenceCmt::<f32>::new(&cfg, 5).unwrap();
    assert!(untied.param_count() > 2 * tied.param_count());
}

#[test]
fn single_modality_config_runs() {
    // The EEG-only ablation: cross-modal stack is (CLS_cross, CLS_eeg).
    let mut cfg = small_config();
    cfg.modalities = vec!["eeg".into()];
    let model = EpochCmt::<f32>::new(&cfg, 5).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let signals = random_signals(&mut rng, &[1, 300, 1]);
    let mut tape = Tape::new();
    let (out, _) = model.forward(&mut tape, &signals, false).unwrap();
    assert_eq!(tape.value(out.logits).shape(), &[1, 5]);
    assert_eq!(tape.value(out.trace[0].cross_out).shape(), &[2, cfg.embed_dim]);
}

#[test]
fn multiscale_features_shape_contract() {
    let mut cfg = small_config();
    cfg.epoch_samples = 3000;
    let model = EpochCmt::<f32>::new(&cfg, 5).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let x = random_signals(&mut rng, &[3000, 1]);
    let mut tape = Tape::new();
    let feats = model.multiscale_features(&mut tape, 0, &x).unwrap();
    assert_eq!(tape.value(feats).shape(), &[1, 60, cfg.embed_dim]);

    // Mismatched input length is rejected at the contract boundary.
    let half = Tensor::<f32>::zeros(&[1500, 1]);
    let mut tape = Tape::new();
    assert!(model.multiscale_features(&mut tape, 0, &half).is_err());
}

#[test]
fn zero_input_gives_identical_cnn_rows() {
    // Zero input: every tiled window sees only biases, so all feature rows
    // coincide.
    let cfg = small_config();
    let model = EpochCmt::<f32>::new(&cfg, 5).unwrap();
    let x = Tensor::<f32>::zeros(&[300, 1]);
    let mut tape = Tape::new();
    let feats = model.multiscale_features(&mut tape, 0, &x).unwrap();
    let t = tape.value(feats).clone();
    let flat = t.reshaped(&[300 / 50, cfg.embed_dim]).unwrap();
    let first = flat.row(0).to_vec();
    for r in 1..300 / 50 {
        assert_eq!(flat.row(r), first.as_slice(), "row {r} differs");
    }
}
