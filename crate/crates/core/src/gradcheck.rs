//! Central finite-difference verification of every differentiable primitive.
//!
//! The check perturbs each input coordinate by `h` in both directions,
//! re-runs the forward pass, and compares the secant slope against the
//! gradient produced by `Tape::backward`. It runs in f64 and never consults
//! the backward rules it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::model::{EpochCmt, ModelConfig};
use crate::nn::{self, MhaVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_REPEATS: usize = 10;

/// One forward program under test: builds a scalar loss from a set of
/// perturbable inputs.
///
/// `build` receives the tape and the current input values and must return the
/// loss var. Inputs are registered as params so their gradients populate.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
    /// Step override for deep compositions where the default step's
    /// truncation error dominates the tolerance.
    pub h_override: Option<f64>,
    /// Check at most this many coordinates (evenly strided) per run.
    pub coord_cap: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked_coords: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub ops: Vec<OpReport>,
    pub tolerance: f64,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }
}

fn run_forward(case: &Case, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = (case.build)(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Max relative error between analytic and finite-difference gradients over
/// the checked coordinates of `case`.
pub fn check_case(case: &Case, default_h: f64) -> Result<(f64, usize)> {
    let h = case.h_override.unwrap_or(default_h);
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = (case.build)(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        })
        .collect();

    let total: usize = case.inputs.iter().map(Tensor::numel).sum();
    let stride = match case.coord_cap {
        Some(cap) if cap < total => total.div_ceil(cap),
        _ => 1,
    };

    let mut max_rel = 0.0f64;
    let mut coords = 0usize;
    let mut flat = 0usize;
    for (i, input) in case.inputs.iter().enumerate() {
        for j in 0..input.numel() {
            flat += 1;
            if (flat - 1) % stride != 0 {
                continue;
            }
            let mut plus = case.inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = case.inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let fd = (run_forward(case, &plus)? - run_forward(case, &minus)?) / (2.0 * h);
            let a = analytic[i][j];
            // Near-zero gradients fall back to absolute error: the FD value
            // carries rounding noise of order eps*|loss|/(2h), which no step
            // size can push below a relative 1e-4 when the gradient itself is
            // of order 1e-6.
            let denom = a.abs().max(fd.abs());
            let rel = if denom > 1e-5 {
                (a - fd).abs() / denom
            } else {
                (a - fd).abs()
            };
            max_rel = max_rel.max(rel);
            coords += 1;
        }
    }
    Ok((max_rel, coords))
}

fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<f64> {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random tensor with values kept away from zero, for kink-free checks of
/// piecewise-linear ops.
fn rand_tensor_offset(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<f64> {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weight the raw output by a fixed random tensor so the scalar loss is
/// sensitive to every output coordinate.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, probe: &Tensor<f64>) -> Result<Var> {
    let w = tape.leaf(probe.clone());
    let flat_out = tape.reshape(out, &[probe.numel(), 1])?;
    let flat_w = tape.reshape(w, &[probe.numel(), 1])?;
    let prod = tape.mul(flat_out, flat_w)?;
    tape.sum(prod)
}

/// The registry of differentiable-op cases for one seed. Every primitive the
/// models rely on is listed; `epoch_cmt` covers the full composed forward.
pub fn build_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    // add
    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let probe = rand_tensor(&mut rng, &[3, 4]);
        cases.push(Case {
            name: "add",
            h_override: None,
            coord_cap: None,
            inputs: vec![a, b],
            build: Box::new(move |tape, vars| {
                let y = tape.add(vars[0], vars[1])?;
                weighted_sum(tape, y, &probe)
            }),
        });
    }
    // mul
    {
        let a = rand_tensor(&mut rng, &[2, 5]);
        let b = rand_tensor(&mut rng, &[2, 5]);
        let probe = rand_tensor(&mut rng, &[2, 5]);
        cases.push(Case {
            name: "mul",
            h_override: None,
            coord_cap: None,
            inputs: vec![a, b],
            build: Box::new(move |tape, vars| {
                let y = tape.mul(vars[0], vars[1])?;
                weighted_sum(tape, y, &probe)
            }),
        });
    }
    // scale
    {
        let a = rand_tensor(&mut rng, &[4, 3]);
        let probe = rand_tensor(&mut rng, &[4, 3]);
        let factor = rng.gen_range(0.2..2.0);
        cases.push(Case {
            name: "scale",
            h_override: None,
            coord_cap: None,
            inputs: vec![a],
            build: Box::new(move |tape, vars| {
                let y = tape.scale(vars[0], factor)?;
                weighted_sum(tape, y, &probe)
            }),
        });
    }
    // add_bias
    {
        let x = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let probe = rand_tensor(&mut rng, &[4, 3]);
        cases.push(Case {
            name: "add_bias",
            h_override: None,
            coord_cap: None,
            inputs: vec![x, b],
            build: Box::new(move |tape, vars| {
                let y = tape.add_bias(vars[0], vars[1])?;
                weighted_sum(tape, y, &probe)
            }),
        });
    }
    // matmul
    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let probe = rand_tensor(&mut rng, &[3, 2]);
        cases.push(Case {
            name: "matmul",
            h_override: None,
            coord_cap: None,
            inputs: vec![a, b],
            build: Box::new(move |tape, vars| {
                let y = tape.matmul(vars[0], vars[1])?;
                weighted_sum(tape, y, &probe)
            }),
        });
    }
    // transpose
    {
        let a = rand_tensor(&mut rng, &[3, 5]);
        let probe = rand_tensor(&mut rng, &[5, 3]);
        cases.push(Case {
            name: "transpose",
            h_override: None,
            coord_cap: None,
            inputs: vec![a],
            build: Box::new(move |tape, vars| {
                let y = tape.transpose(vars[0])?;
                weighted_sum(tape, y, &probe)
            }),
        });
    }
    // conv1d (batched, stride > 1)
    {
        let x = rand_tensor(&mut rng, &[2, 12, 3]);
        let w = rand_tensor(&mut rng, &[4, 3, 2]);
        let b = rand_tensor(&mut rng, &[4]);
        let probe = rand_tensor(&mut rng, &[2, 6, 4]);
        cases.push(Case {
            name: "conv1d",
            h_override: None,
            coord_cap: None,
            inputs: vec![x, w, b],
            build: Box::new(move |tape, vars| {
                let y = tape.conv1d(vars[0], vars[1], vars[2], 2)?;
                weighted_sum(tape, y, &probe)
            }),
        });
    }
    // leaky_relu (inputs offset from the kink)
    {
        let x = rand_tensor_offset(&mut rng, &[4, 4]);
        let probe = rand_tensor(&mut rng, &[4, 4]);
        cases.push(Case {
            name: "leaky_relu",
            h_override: None,
            coord_cap: None,
            inputs: vec![x],
            build: Box::new(move |tape, vars| {
                let y = tape.leaky_relu(vars[0], 0.01)?;
                weighted_sum(tape, y, &probe)
            }),
        });
    }
    // softmax
    {
        let x = rand_tensor(&mut rng, &[3, 5]);
        let probe = rand_tensor(&mut rng, &[3, 5]);
        cases.push(Case {
            name: "softmax",
            h_override: None,
            coord_cap: None,
            inputs: vec![x],
            build: Box::new(move |tape, vars| {
                let y = tape.softmax(vars[0], 1)?;
                weighted_sum(tape, y, &probe)
            }),
        });
    }
    // layer_norm
    {
        let x = rand_tensor(&mut rng, &[3, 6]);
        let gamma = rand_tensor(&mut rng, &[6]);
        let beta = rand_tensor(&mut rng, &[6]);
        let probe = rand_tensor(&mut rng, &[3, 6]);
        cases.push(Case {
            name: "layer_norm",
            h_override: None,
            coord_cap: None,
            inputs: vec![x, gamma, beta],
            build: Box::new(move |tape, vars| {
                let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                weighted_sum(tape, y, &probe)
            }),
        });
    }
    // batch_norm (train mode, differentiates through batch statistics)
    {
        let x = rand_tensor(&mut rng, &[2, 5, 3]);
        let gamma = rand_tensor(&mut rng, &[3]);
        let beta = rand_tensor(&mut rng, &[3]);
        let probe = rand_tensor(&mut rng, &[2, 5, 3]);
        cases.push(Case {
            name: "batch_norm",
            h_override: None,
            coord_cap: None,
            inputs: vec![x, gamma, beta],
            build: Box::new(move |tape, vars| {
                let (y, _) = tape.batch_norm_train(vars[0], vars[1], vars[2], 1e-5)?;
                weighted_sum(tape, y, &probe)
            }),
        });
    }
    // concat_rows + slice_rows
    {
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[3, 3]);
        let probe = rand_tensor(&mut rng, &[3, 3]);
        cases.push(Case {
            name: "concat_slice_rows",
            h_override: None,
            coord_cap: None,
            inputs: vec![a, b],
            build: Box::new(move |tape, vars| {
                let y = tape.concat_rows(&[vars[0], vars[1]])?;
                let s = tape.slice_rows(y, 1, 3)?;
                weighted_sum(tape, s, &probe)
            }),
        });
    }
    // concat_cols + slice_cols
    {
        let a = rand_tensor(&mut rng, &[3, 2]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let probe = rand_tensor(&mut rng, &[3, 4]);
        cases.push(Case {
            name: "concat_slice_cols",
            h_override: None,
            coord_cap: None,
            inputs: vec![a, b],
            build: Box::new(move |tape, vars| {
                let y = tape.concat_cols(&[vars[0], vars[1]])?;
                let s = tape.slice_cols(y, 1, 4)?;
                weighted_sum(tape, s, &probe)
            }),
        });
    }
    // reshape
    {
        let a = rand_tensor(&mut rng, &[2, 6]);
        let probe = rand_tensor(&mut rng, &[3, 4]);
        cases.push(Case {
            name: "reshape",
            h_override: None,
            coord_cap: None,
            inputs: vec![a],
            build: Box::new(move |tape, vars| {
                let y = tape.reshape(vars[0], &[3, 4])?;
                weighted_sum(tape, y, &probe)
            }),
        });
    }
    // sum / mean
    {
        let a = rand_tensor(&mut rng, &[3, 3]);
        cases.push(Case {
            name: "sum",
            h_override: None,
            coord_cap: None,
            inputs: vec![a],
            build: Box::new(|tape, vars| tape.sum(vars[0])),
        });
        let a = rand_tensor(&mut rng, &[3, 3]);
        cases.push(Case {
            name: "mean",
            h_override: None,
            coord_cap: None,
            inputs: vec![a],
            build: Box::new(|tape, vars| tape.mean(vars[0])),
        });
    }
    // weighted cross entropy
    {
        let logits = rand_tensor(&mut rng, &[4, 5]);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
        cases.push(Case {
            name: "weighted_cross_entropy",
            h_override: None,
            coord_cap: None,
            inputs: vec![logits],
            build: Box::new(move |tape, vars| {
                tape.weighted_cross_entropy(vars[0], &labels, &[1.0, 2.0, 1.0, 2.0, 2.0])
            }),
        });
    }
    // multi_head_attention (composite)
    {
        let e = 4;
        let x = rand_tensor(&mut rng, &[3, e]);
        let wq = rand_tensor(&mut rng, &[e, e]);
        let bq = rand_tensor(&mut rng, &[e]);
        let wk = rand_tensor(&mut rng, &[e, e]);
        let bk = rand_tensor(&mut rng, &[e]);
        let wv = rand_tensor(&mut rng, &[e, e]);
        let bv = rand_tensor(&mut rng, &[e]);
        let wo = rand_tensor(&mut rng, &[e, e]);
        let bo = rand_tensor(&mut rng, &[e]);
        let probe = rand_tensor(&mut rng, &[3, e]);
        cases.push(Case {
            name: "multi_head_attention",
            h_override: None,
            coord_cap: None,
            inputs: vec![x, wq, bq, wk, bk, wv, bv, wo, bo],
            build: Box::new(move |tape, vars| {
                let params = MhaVars {
                    wq: vars[1],
                    bq: vars[2],
                    wk: vars[3],
                    bk: vars[4],
                    wv: vars[5],
                    bv: vars[6],
                    wo: vars[7],
                    bo: vars[8],
                };
                let out = nn::multi_head_attention(tape, vars[0], vars[0], vars[0], &params, 2)?;
                weighted_sum(tape, out.out, &probe)
            }),
        });
    }
    // full epoch model forward, gradients with respect to all parameters
    {
        let config = ModelConfig::tiny_for_gradcheck();
        let model = EpochCmt::<f64>::new(&config, seed ^ 0x9e37_79b9).unwrap();
        let batch = 2usize;
        let samples = config.epoch_samples;
        let modalities = config.modalities.len();
        let signals = rand_tensor(&mut rng, &[batch, samples, modalities]);
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..5)).collect();
        let params: Vec<Tensor<f64>> = model.params().tensors().to_vec();
        cases.push(Case {
            name: "epoch_cmt",
            // Smaller step: the default's O(h^2) truncation error is visible
            // through the deep composition. Coordinates are strided to keep
            // the quadratic FD cost bounded.
            h_override: Some(1e-6),
            coord_cap: Some(320),
            inputs: params,
            build: Box::new(move |tape, vars| {
                let out = model.forward_with_params(tape, vars, &signals, true)?;
                tape.weighted_cross_entropy(out.logits, &labels, &[1.0, 2.0, 1.0, 2.0, 2.0])
            }),
        });
    }
    cases
}

/// Run every registered case `repeats` times with varying seeds; returns a
/// per-op report with the maximum relative error observed.
pub fn run_suite(seed: u64, repeats: usize, h: f64, tolerance: f64) -> Result<Report> {
    let names: Vec<&'static str> = build_cases(seed).iter().map(|c| c.name).collect();
    let mut max_errs = vec![0.0f64; names.len()];
    let mut coords = vec![0usize; names.len()];
    for rep in 0..repeats {
        let cases = build_cases(seed.wrapping_add(rep as u64 * 7919));
        for (i, case) in cases.iter().enumerate() {
            let (err, n) = check_case(case, h)?;
            max_errs[i] = max_errs[i].max(err);
            coords[i] += n;
        }
    }
    let ops = names
        .into_iter()
        .zip(max_errs)
        .zip(coords)
        .map(|((name, max_rel_err), checked_coords)| OpReport {
            name: name.to_string(),
            max_rel_err,
            checked_coords,
            passed: max_rel_err < tolerance,
        })
        .collect();
    Ok(Report {
        ops,
        tolerance,
    })
}

/// Names every suite run must cover; used as a coverage check by the CLI.
pub fn registered_ops() -> Vec<&'static str> {
    build_cases(0).iter().map(|c| c.name).collect()
}

/// Fail with a usage error if `report` is missing any registered op.
pub fn verify_coverage(report: &Report) -> Result<()> {
    for name in registered_ops() {
        if !report.ops.iter().any(|o| o.name == name) {
            return Err(Error::Internal(format!(
                "gradient check report missing op {}",
                name
            )));
        }
    }
    Ok(())
}
