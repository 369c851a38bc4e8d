//! Network building blocks composed from tape primitives: linear layers,
//! multi-head attention, and sinusoidal positional encodings.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{sc, Scalar, Tensor};

/// Projection parameters for one multi-head attention, already on the tape.
#[derive(Clone, Copy, Debug)]
pub struct MhaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Attention output plus the per-head attention weight matrices, each `[S, S]`
/// and row-stochastic.
pub struct MhaOut {
    pub out: Var,
    pub head_weights: Vec<Var>,
}

/// `x . w + b` with `w` laid out `[in, out]`.
pub fn linear<F: Scalar>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Standard scaled dot-product multi-head attention over `[S, E]` inputs.
///
/// Heads are column slices of width `E / heads`; per-head scores use scale
/// `1/sqrt(E/heads)`, softmax over keys, and the concatenated heads pass
/// through the output projection. Output shape equals the query shape.
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    params: &MhaVars,
    heads: usize,
) -> Result<MhaOut> {
    let (_, e) = tape.value(q).dims2()?;
    if heads == 0 || e % heads != 0 {
        return Err(Error::Config(format!(
            "embedding dim {} not divisible by {} heads",
            e, heads
        )));
    }
    let dh = e / heads;
    let scale = sc::<F>(1.0 / (dh as f64).sqrt());

    let qp = linear(tape, q, params.wq, params.bq)?;
    let kp = linear(tape, k, params.wk, params.bk)?;
    let vp = linear(tape, v, params.wv, params.bv)?;

    let mut head_outs = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(qp, h * dh, dh)?;
        let kh = tape.slice_cols(kp, h * dh, dh)?;
        let vh = tape.slice_cols(vp, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let attn = tape.softmax(scaled, 1)?;
        let out = tape.matmul(attn, vh)?;
        head_outs.push(out);
        head_weights.push(attn);
    }
    let merged = tape.concat_cols(&head_outs)?;
    let out = linear(tape, merged, params.wo, params.bo)?;
    Ok(MhaOut { out, head_weights })
}

/// Sinusoidal positional encoding: `PE[p, 2i] = sin(p / 10000^(2i/E))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/E))`. Requires an even dimension.
pub fn positional_encoding<F: Scalar>(len: usize, dim: usize) -> Result<Tensor<F>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even dimension, got {}",
            dim
        )));
    }
    let mut data = vec![F::zero(); len * dim];
    for p in 0..len {
        for i in 0..dim / 2 {
            let rate = (10000f64).powf(2.0 * i as f64 / dim as f64);
            let angle = p as f64 / rate;
            data[p * dim + 2 * i] = sc(angle.sin());
            data[p * dim + 2 * i + 1] = sc(angle.cos());
        }
    }
    Tensor::new(vec![len, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_boundary_values() {
        let pe = positional_encoding::<f64>(4, 6).unwrap();
        // PE[0, 2i] = 0, PE[0, 2i+1] = 1
        for i in 0..3 {
            assert_eq!(pe.data()[2 * i], 0.0);
            assert_eq!(pe.data()[2 * i + 1], 1.0);
        }
        // PE[1, 0] = sin(1)
        assert!((pe.data()[6] - 1.0f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn positional_encoding_rejects_odd_dim() {
        assert!(positional_encoding::<f64>(4, 5).is_err());
    }

    fn identity_mha_vars(tape: &mut Tape<f64>, e: usize) -> MhaVars {
        let eye = {
            let mut d = vec![0.0; e * e];
            for i in 0..e {
                d[i * e + i] = 1.0;
            }
            Tensor::from_f64_slice(&[e, e], &d).unwrap()
        };
        let zero = Tensor::<f64>::zeros(&[e]);
        MhaVars {
            wq: tape.leaf(eye.clone()),
            bq: tape.leaf(zero.clone()),
            wk: tape.leaf(eye.clone()),
            bk: tape.leaf(zero.clone()),
            wv: tape.leaf(eye.clone()),
            bv: tape.leaf(zero.clone()),
            wo: tape.leaf(eye),
            bo: tape.leaf(zero),
        }
    }

    #[test]
    fn single_position_attention_is_identity() {
        // S=1: softmax over one element is 1, so output == v with identity projections
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_f64_slice(&[1, 4], &[0.3, -1.2, 0.8, 2.0]).unwrap());
        let params = identity_mha_vars(&mut tape, 4);
        let out = multi_head_attention(&mut tape, x, x, x, &params, 2).unwrap();
        for (a, b) in tape.value(out.out).data().iter().zip([0.3, -1.2, 0.8, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_query_gives_uniform_weights() {
        // q orthogonal to equal-norm keys -> all scores equal -> uniform 1/S
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::from_f64_slice(&[1, 2], &[0.0, 1.0]).unwrap());
        let kv = tape.leaf(
            Tensor::from_f64_slice(&[3, 2], &[1.0, 0.0, -1.0, 0.0, 1.0, 0.0]).unwrap(),
        );
        let params = identity_mha_vars(&mut tape, 2);
        let out = multi_head_attention(&mut tape, q, kv, kv, &params, 1).unwrap();
        let w = tape.value(out.head_weights[0]).data();
        for &wi in w {
            assert!((wi - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_position_attention_matches_hand_computation() {
        // S=2, heads=1, identity projections: scores, softmax, and the weighted
        // sum computed by hand.
        let x = [1.0, 0.0, 0.5, 0.5];
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::from_f64_slice(&[2, 2], &x).unwrap());
        let params = identity_mha_vars(&mut tape, 2);
        let out = multi_head_attention(&mut tape, xv, xv, xv, &params, 1).unwrap();

        let scale = 1.0 / 2.0f64.sqrt();
        let rows = [[x[0], x[1]], [x[2], x[3]]];
        let mut expected = [0.0; 4];
        for i in 0..2 {
            let s0 = (rows[i][0] * rows[0][0] + rows[i][1] * rows[0][1]) * scale;
            let s1 = (rows[i][0] * rows[1][0] + rows[i][1] * rows[1][1]) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            let (a0, a1) = (e0 / z, e1 / z);
            expected[i * 2] = a0 * rows[0][0] + a1 * rows[1][0];
            expected[i * 2 + 1] = a0 * rows[0][1] + a1 * rows[1][1];
        }
        for (a, b) in tape.value(out.out).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[2, 6]));
        let params = identity_mha_vars(&mut tape, 6);
        assert!(multi_head_attention(&mut tape, x, x, x, &params, 4).is_err());
    }
}
