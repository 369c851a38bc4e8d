//! Property tests for the engine and pipeline invariants.

use cmt_core::dataset::subject_independent_folds;
use cmt_core::filter::design_fir_bandpass;
use cmt_core::labels::{map_raw_label, MappedLabel};
use cmt_core::pipeline::normalize;
use cmt_core::tape::Tape;
use cmt_core::tensor::Tensor;
use proptest::prelude::*;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-50.0..50.0f64, len)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        xs in finite_vec(12),
        shift in -100.0..100.0f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 4], xs.clone()).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..3 {
            let sum: f64 = tape.value(y).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
        let shifted: Vec<f64> = xs.iter().map(|v| v + shift).collect();
        let xs2 = tape.leaf(Tensor::new(vec![3, 4], shifted).unwrap());
        let y2 = tape.softmax(xs2, 1).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(y2).data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_with_kernel_equal_stride_tiles_the_input(
        xs in finite_vec(24),
        ws in finite_vec(4),
        bias in -2.0..2.0f64,
    ) {
        // K = stride = 4, one input channel: each output row is the dot
        // product of one non-overlapping window with the kernel.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![24, 1], xs.clone()).unwrap());
        let w = tape.leaf(Tensor::new(vec![1, 1, 4], ws.clone()).unwrap());
        let b = tape.leaf(Tensor::new(vec![1], vec![bias]).unwrap());
        let y = tape.conv1d(x, w, b, 4).unwrap();
        prop_assert_eq!(tape.value(y).shape(), &[6, 1]);
        for t in 0..6 {
            let window = &xs[t * 4..(t + 1) * 4];
            // Same accumulation order as the kernel so equality is exact.
            let mut expect = bias;
            for (a, b) in window.iter().zip(&ws) {
                expect += a * b;
            }
            prop_assert_eq!(tape.value(y).data()[t], expect);
        }
    }

    #[test]
    fn layer_norm_is_shift_invariant(xs in finite_vec(8), shift in -30.0..30.0f64) {
        let mut tape = Tape::new();
        let gamma = tape.leaf(Tensor::full(&[8], 1.0));
        let beta = tape.leaf(Tensor::<f64>::zeros(&[8]));
        let x = tape.leaf(Tensor::new(vec![1, 8], xs.clone()).unwrap());
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let shifted: Vec<f64> = xs.iter().map(|v| v + shift).collect();
        let x2 = tape.leaf(Tensor::new(vec![1, 8], shifted).unwrap());
        let y2 = tape.layer_norm(x2, gamma, beta, 1e-5).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(y2).data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn dag_gradients_match_unrolled_tree(
        leaves in proptest::collection::vec(-2.0..2.0f64, 3),
        ops in proptest::collection::vec(0u8..2, 5),
    ) {
        // Build a 5-node program where each node reuses earlier nodes (DAG),
        // then rebuild it with every intermediate recomputed (tree). Leaf
        // gradients must agree.
        let dag = {
            let mut tape = Tape::new();
            let l: Vec<_> = leaves
                .iter()
                .map(|&v| tape.param(Tensor::scalar(v)))
                .collect();
            let mut nodes = l.clone();
            for (i, &op) in ops.iter().enumerate() {
                let a = nodes[i % nodes.len()];
                let b = nodes[(i * 2 + 1) % nodes.len()];
                let n = if op == 0 { tape.add(a, b).unwrap() } else { tape.mul(a, b).unwrap() };
                nodes.push(n);
            }
            let last = *nodes.last().unwrap();
            tape.backward(last).unwrap();
            l.iter().map(|&v| tape.grad(v).map(|g| g[0]).unwrap_or(0.0)).collect::<Vec<_>>()
        };
        let tree = {
            // Recompute every interior node on demand instead of reusing it.
            let mut tape = Tape::new();
            let l: Vec<_> = leaves
                .iter()
                .map(|&v| tape.param(Tensor::scalar(v)))
                .collect();
            fn build(
                idx: usize,
                n_leaves: usize,
                ops: &[u8],
                l: &[cmt_core::tape::Var],
                tape: &mut Tape<f64>,
            ) -> cmt_core::tape::Var {
                if idx < n_leaves {
                    return l[idx];
                }
                let i = idx - n_leaves;
                let len = idx; // nodes available when node idx was built
                let a = build(i % len, n_leaves, ops, l, tape);
                let b = build((i * 2 + 1) % len, n_leaves, ops, l, tape);
                if ops[i] == 0 { tape.add(a, b).unwrap() } else { tape.mul(a, b).unwrap() }
            }
            let root = build(leaves.len() + ops.len() - 1, leaves.len(), &ops, &l, &mut tape);
            tape.backward(root).unwrap();
            l.iter().map(|&v| tape.grad(v).map(|g| g[0]).unwrap_or(0.0)).collect::<Vec<_>>()
        };
        for (a, b) in dag.iter().zip(&tree) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs())), "{a} vs {b}");
        }
    }

    #[test]
    fn normalize_is_idempotent_and_standardizing(xs in finite_vec(64)) {
        let mut x = xs.clone();
        let ok = normalize(&mut x);
        if ok {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
            let once = x.clone();
            normalize(&mut x);
            for (a, b) in x.iter().zip(&once) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn every_label_token_maps_to_one_outcome(token in "[W01234RM?]") {
        // Label partition: each valid token maps to exactly one of the five
        // stages or DISCARD.
        let mapped = map_raw_label(&token).unwrap();
        match mapped {
            MappedLabel::Stage(s) => prop_assert!(s.index() < 5),
            MappedLabel::Discard => {}
        }
    }

    #[test]
    fn folds_partition_subjects(n in 5usize..60, k in 2usize..6, seed in 0u64..1000) {
        prop_assume!(n >= k);
        let subjects: Vec<String> = (0..n).map(|i| format!("S{i}")).collect();
        let split = subject_independent_folds(&subjects, k, seed).unwrap();
        prop_assert_eq!(split.assignments.len(), n);
        let mut sizes = vec![0usize; k];
        for s in &subjects {
            let f = split.fold_of(s).expect("every subject assigned");
            sizes[f] += 1;
        }
        let min = *sizes.iter().min().unwrap();
        let max = *sizes.iter().max().unwrap();
        prop_assert!(max - min <= 1, "sizes {:?}", sizes);
        prop_assert!(min >= 1);
    }

    #[test]
    fn filter_taps_are_symmetric(
        taps_half in 1usize..200,
        low in 0.1..2.0f64,
        width in 5.0..35.0f64,
    ) {
        let num_taps = taps_half * 2 + 1;
        let f = design_fir_bandpass(100.0, low, low + width, num_taps).unwrap();
        let t = f.taps();
        for i in 0..t.len() {
            prop_assert_eq!(t[i].to_bits(), t[t.len() - 1 - i].to_bits());
        }
    }

    #[test]
    fn confusion_accumulation_is_order_independent(
        pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..80),
        swap_seed in 0usize..1000,
    ) {
        use cmt_core::metrics::ConfusionMatrix;
        let a = ConfusionMatrix::from_pairs(&pairs).unwrap();
        let mut shuffled = pairs.clone();
        // Deterministic permutation derived from swap_seed.
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, (swap_seed * 7 + i * 13) % (i + 1));
        }
        let b = ConfusionMatrix::from_pairs(&shuffled).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(ConfusionMatrix::from_pairs(&pairs).unwrap().total() as usize, pairs.len());
    }
}
