//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! Every forward operation appends one node holding its output value, the
//! handles of its inputs, and whatever intermediates its backward rule needs.
//! Nodes are therefore already in topological order; `backward` walks the tape
//! once in reverse, accumulating gradients additively across fan-out.
//!
//! A tape is built, differentiated, and dropped on a single thread. Parallel
//! training or inference runs one tape per worker.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{sc, softmax_in_place, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Per-channel batch statistics returned by train-mode batch normalization,
/// for the caller to fold into its running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Population (biased) variance.
    pub var: Vec<F>,
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddBias {
        x: Var,
        bias: Var,
    },
    Matmul(Var, Var),
    Transpose(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    },
    LeakyRelu {
        x: Var,
        slope: F,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    WeightedCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Flat record of forward operations with reverse-mode gradients.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        debug_assert!(
            value.is_finite(),
            "non-finite values in forward op output (shape {:?})",
            value.shape()
        );
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a constant input; gradients do not flow into it.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Record a trainable input; `backward` populates its gradient.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    // ---- elementwise and linear algebra ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, self.rg(a) || self.rg(b), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, self.rg(a) || self.rg(b), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * factor).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, self.rg(a), Op::Scale(a, factor)))
    }

    /// Broadcast-add a vector over the last axis: `[.. , C] + [C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self
            .value(x)
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("add_bias on 0-d tensor".into()))?;
        if self.value(bias).shape() != [c] {
            return Err(Error::Shape(format!(
                "add_bias: bias {:?} vs last axis {}",
                self.value(bias).shape(),
                c
            )));
        }
        let bv = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(&bv) {
                *o = *o + b;
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(out, self.rg(x) || self.rg(bias), Op::AddBias { x, bias }))
    }

    /// 2-d matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if k != kb {
            return Err(Error::Shape(format!("matmul: inner dims {} vs {}", k, kb)));
        }
        let mut data = vec![F::zero(); m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            exec::for_each_row(&mut data, n, |i, row| {
                for p in 0..k {
                    let aip = av[i * k + p];
                    let brow = &bv[p * n..(p + 1) * n];
                    for (o, &bpj) in row.iter_mut().zip(brow) {
                        *o = *o + aip * bpj;
                    }
                }
            });
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, self.rg(a) || self.rg(b), Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let av = self.value(a).data();
        let mut data = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(out, self.rg(a), Op::Transpose(a)))
    }

    // ---- neural-network primitives ----

    /// Valid (unpadded) 1-d convolution.
    ///
    /// `x` is `[T, C_in]` or `[N, T, C_in]`, `kernel` is `[C_out, C_in, K]`,
    /// `bias` is `[C_out]`. Output length is `floor((T - K)/stride) + 1`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("conv1d: stride must be >= 1".into()));
        }
        let (batch, t_in, c_in, batched) = match self.value(x).shape() {
            [t, c] => (1usize, *t, *c, false),
            [n, t, c] => (*n, *t, *c, true),
            s => return Err(Error::Shape(format!("conv1d: input {:?}", s))),
        };
        let (c_out, kc_in, k) = self.value(kernel).dims3()?;
        if kc_in != c_in {
            return Err(Error::Shape(format!(
                "conv1d: kernel expects {} input channels, input has {}",
                kc_in, c_in
            )));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(Error::Shape(format!(
                "conv1d: bias {:?} vs {} output channels",
                self.value(bias).shape(),
                c_out
            )));
        }
        if t_in < k {
            return Err(Error::Shape(format!(
                "conv1d: input length {} shorter than kernel {}",
                t_in, k
            )));
        }
        let t_out = (t_in - k) / stride + 1;
        let mut data = vec![F::zero(); batch * t_out * c_out];
        {
            let xv = self.value(x).data();
            let wv = self.value(kernel).data();
            let bv = self.value(bias).data();
            exec::for_each_row(&mut data, c_out, |row_idx, row| {
                let n = row_idx / t_out;
                let t = row_idx % t_out;
                let x_base = (n * t_in + t * stride) * c_in;
                for (o, out) in row.iter_mut().enumerate() {
                    let mut acc = bv[o];
                    let w_base = o * c_in * k;
                    for c in 0..c_in {
                        for kk in 0..k {
                            acc = acc + xv[x_base + kk * c_in + c] * wv[w_base + c * k + kk];
                        }
                    }
                    *out = acc;
                }
            });
        }
        let shape = if batched {
            vec![batch, t_out, c_out]
        } else {
            vec![t_out, c_out]
        };
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            out,
            rg,
            Op::Conv1d {
                x,
                kernel,
                bias,
                stride,
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Result<Var> {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { v * slope })
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(out, self.rg(x), Op::LeakyRelu { x, slope }))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "softmax: axis {} out of range for {:?}",
                axis, shape
            )));
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = self.value(x).data().to_vec();
        let mut buf = vec![F::zero(); lane];
        for o in 0..outer {
            for i in 0..inner {
                for l in 0..lane {
                    buf[l] = data[(o * lane + l) * inner + i];
                }
                softmax_in_place(&mut buf);
                for l in 0..lane {
                    data[(o * lane + l) * inner + i] = buf[l];
                }
            }
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, self.rg(x), Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let e = *shape
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on 0-d tensor".into()))?;
        if self.value(gamma).shape() != [e] || self.value(beta).shape() != [e] {
            return Err(Error::Shape(format!(
                "layer_norm: affine params {:?}/{:?} vs feature dim {}",
                self.value(gamma).shape(),
                self.value(beta).shape(),
                e
            )));
        }
        let rows = self.value(x).numel() / e;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut xhat = vec![F::zero(); rows * e];
        let mut inv_std = vec![F::zero(); rows];
        let mut data = vec![F::zero(); rows * e];
        let ef = sc::<F>(e as f64);
        for r in 0..rows {
            let row = &xv[r * e..(r + 1) * e];
            let mean = row.iter().cloned().fold(F::zero(), |a, b| a + b) / ef;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(F::zero(), |a, b| a + b)
                / ef;
            let istd = F::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..e {
                let xh = (row[j] - mean) * istd;
                xhat[r * e + j] = xh;
                data[r * e + j] = xh * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Train-mode batch normalization over `[N, T, C]` (or `[T, C]`) with
    /// per-channel statistics. Returns the batch statistics so the caller can
    /// update running estimates; normalization itself uses the batch values
    /// and is differentiated through them.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> Result<(Var, BatchStats<F>)> {
        let (rows, c) = self.norm_dims(x, gamma, beta)?;
        if rows < 2 {
            return Err(Error::Input(format!(
                "batch_norm train mode needs at least 2 positions per channel, got {}",
                rows
            )));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let rf = sc::<F>(rows as f64);
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for r in 0..rows {
            for j in 0..c {
                mean[j] = mean[j] + xv[r * c + j];
            }
        }
        for m in mean.iter_mut() {
            *m = *m / rf;
        }
        for r in 0..rows {
            for j in 0..c {
                let d = xv[r * c + j] - mean[j];
                var[j] = var[j] + d * d;
            }
        }
        for v in var.iter_mut() {
            *v = *v / rf;
        }
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); rows * c];
        let mut data = vec![F::zero(); rows * c];
        for r in 0..rows {
            for j in 0..c {
                let xh = (xv[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = xh;
                data[r * c + j] = xh * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let var_out = Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std: inv_std.clone(),
        };
        let v = self.push(out, rg, var_out);
        Ok((v, BatchStats { mean, var }))
    }

    /// Eval-mode batch normalization using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        eps: F,
    ) -> Result<Var> {
        let (rows, c) = self.norm_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm_eval: running stats len {}/{} vs {} channels",
                running_mean.len(),
                running_var.len(),
                c
            )));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let inv_std: Vec<F> = running_var
            .iter()
            .map(|&v| F::one() / (v + eps).sqrt())
            .collect();
        let mut xhat = vec![F::zero(); rows * c];
        let mut data = vec![F::zero(); rows * c];
        for r in 0..rows {
            for j in 0..c {
                let xh = (xv[r * c + j] - running_mean[j]) * inv_std[j];
                xhat[r * c + j] = xh;
                data[r * c + j] = xh * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            rg,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn norm_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let c = *self
            .value(x)
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("batch_norm on 0-d tensor".into()))?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!(
                "batch_norm: affine params {:?}/{:?} vs {} channels",
                self.value(gamma).shape(),
                self.value(beta).shape(),
                c
            )));
        }
        Ok((self.value(x).numel() / c, c))
    }

    // ---- shape plumbing ----

    /// Stack 2-d tensors along axis 0; all must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows of zero tensors".into()));
        }
        let (_, cols) = self.value(parts[0]).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0usize;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: {} cols vs {}",
                    c, cols
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(out, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `[start, start+len)` of a 2-d tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > rows {
            return Err(Error::Shape(format!(
                "slice_rows: [{}, {}) out of {} rows",
                start,
                start + len,
                rows
            )));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(vec![len, cols], data)?;
        Ok(self.push(out, self.rg(x), Op::SliceRows { x, start }))
    }

    /// Stack 2-d tensors along axis 1; all must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero tensors".into()));
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::Shape(format!(
                    "concat_cols: {} rows vs {}",
                    r, rows
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![F::zero(); rows * total];
        let mut offset = 0usize;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `[start, start+len)` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > cols {
            return Err(Error::Shape(format!(
                "slice_cols: [{}, {}) out of {} cols",
                start,
                start + len,
                cols
            )));
        }
        let xv = self.value(x).data();
        let mut data = vec![F::zero(); rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len].copy_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(out, self.rg(x), Op::SliceCols { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, self.rg(x), Op::Reshape(x)))
    }

    // ---- reductions and loss ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self
            .value(x)
            .data()
            .iter()
            .cloned()
            .fold(F::zero(), |a, b| a + b);
        Ok(self.push(Tensor::scalar(total), self.rg(x), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = sc::<F>(self.value(x).numel() as f64);
        let total = self
            .value(x)
            .data()
            .iter()
            .cloned()
            .fold(F::zero(), |a, b| a + b)
            / n;
        Ok(self.push(Tensor::scalar(total), self.rg(x), Op::Mean(x)))
    }

    /// Class-weighted cross entropy over `[N, K]` logits, normalized by the
    /// sum of the active sample weights (weighted mean).
    pub fn weighted_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: &[F],
    ) -> Result<Var> {
        let (n, k) = self.value(logits).dims2()?;
        if labels.len() != n {
            return Err(Error::Input(format!(
                "weighted_cross_entropy: {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if class_weights.len() != k {
            return Err(Error::Input(format!(
                "weighted_cross_entropy: {} class weights for {} classes",
                class_weights.len(),
                k
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!(
                "weighted_cross_entropy: label {} out of range [0, {})",
                bad, k
            )));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![F::zero(); n * k];
        let mut weight_sum = F::zero();
        let mut loss = F::zero();
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[i * k + j] = e;
                denom = denom + e;
            }
            for j in 0..k {
                probs[i * k + j] = probs[i * k + j] / denom;
            }
            let w = class_weights[labels[i]];
            weight_sum = weight_sum + w;
            // -log p = log(denom) - (logit - max)
            loss = loss + w * (denom.ln() - (row[labels[i]] - max));
        }
        let value = Tensor::scalar(loss / weight_sum);
        Ok(self.push(
            value,
            self.rg(logits),
            Op::WeightedCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: class_weights.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward ----

    /// Backpropagate from a scalar loss, populating gradients for every node
    /// on a `requires_grad` path. Fan-out accumulates additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&self.nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Add `f`'s contribution into the gradient slot of `v` if it participates.
fn acc<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    v: Var,
    f: impl FnOnce(&mut [F]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.numel()]);
    f(slot);
}

fn propagate<F: Scalar>(nodes: &[Node<F>], id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &v in [*a, *b].iter() {
                acc(nodes, grads, v, |d| {
                    for (o, &gi) in d.iter_mut().zip(g) {
                        *o = *o + gi;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            acc(nodes, grads, a, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + g[i] * bv[i];
                }
            });
            acc(nodes, grads, b, |d| {
                for i in 0..d.len() {
                    d[i] = d[i] + g[i] * av[i];
                }
            });
        }
        Op::Scale(a, factor) => {
            let factor = *factor;
            acc(nodes, grads, *a, |d| {
                for (o, &gi) in d.iter_mut().zip(g) {
                    *o = *o + gi * factor;
                }
            });
        }
        Op::AddBias { x, bias } => {
            let c = nodes[bias.0].value.numel();
            acc(nodes, grads, *x, |d| {
                for (o, &gi) in d.iter_mut().zip(g) {
                    *o = *o + gi;
                }
            });
            acc(nodes, grads, *bias, |d| {
                for row in g.chunks(c) {
                    for (o, &gi) in d.iter_mut().zip(row) {
                        *o = *o + gi;
                    }
                }
            });
        }
        Op::Matmul(a, b) => {
            let (a, b) = (*a, *b);
            let (m, k) = nodes[a.0].value.dims2().unwrap();
            let (_, n) = nodes[b.0].value.dims2().unwrap();
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            // dA = g . B^T
            acc(nodes, grads, a, |d| {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = F::zero();
                        let grow = &g[i * n..(i + 1) * n];
                        let brow = &bv[p * n..(p + 1) * n];
                        for j in 0..n {
                            s = s + grow[j] * brow[j];
                        }
                        d[i * k + p] = d[i * k + p] + s;
                    }
                }
            });
            // dB = A^T . g
            acc(nodes, grads, b, |d| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        let drow = &mut d[p * n..(p + 1) * n];
                        for j in 0..n {
                            drow[j] = drow[j] + aip * grow[j];
                        }
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (m, n) = nodes[a.0].value.dims2().unwrap();
            acc(nodes, grads, *a, |d| {
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = d[i * n + j] + g[j * m + i];
                    }
                }
            });
        }
        Op::Conv1d {
            x,
            kernel,
            bias,
            stride,
        } => {
            let stride = *stride;
            let (batch, t_in, c_in) = match nodes[x.0].value.shape() {
                [t, c] => (1usize, *t, *c),
                [n, t, c] => (*n, *t, *c),
                _ => unreachable!(),
            };
            let (c_out, _, k) = nodes[kernel.0].value.dims3().unwrap();
            let t_out = (t_in - k) / stride + 1;
            let xv = nodes[x.0].value.data();
            let wv = nodes[kernel.0].value.data();
            acc(nodes, grads, *x, |d| {
                for n in 0..batch {
                    for t in 0..t_out {
                        let grow = &g[(n * t_out + t) * c_out..(n * t_out + t + 1) * c_out];
                        let x_base = (n * t_in + t * stride) * c_in;
                        for o in 0..c_out {
                            let go = grow[o];
                            let w_base = o * c_in * k;
                            for c in 0..c_in {
                                for kk in 0..k {
                                    d[x_base + kk * c_in + c] =
                                        d[x_base + kk * c_in + c] + go * wv[w_base + c * k + kk];
                                }
                            }
                        }
                    }
                }
            });
            acc(nodes, grads, *kernel, |d| {
                for n in 0..batch {
                    for t in 0..t_out {
                        let grow = &g[(n * t_out + t) * c_out..(n * t_out + t + 1) * c_out];
                        let x_base = (n * t_in + t * stride) * c_in;
                        for o in 0..c_out {
                            let go = grow[o];
                            let w_base = o * c_in * k;
                            for c in 0..c_in {
                                for kk in 0..k {
                                    d[w_base + c * k + kk] =
                                        d[w_base + c * k + kk] + go * xv[x_base + kk * c_in + c];
                                }
                            }
                        }
                    }
                }
            });
            acc(nodes, grads, *bias, |d| {
                for row in g.chunks(c_out) {
                    for (o, &gi) in d.iter_mut().zip(row) {
                        *o = *o + gi;
                    }
                }
            });
        }
        Op::LeakyRelu { x, slope } => {
            let slope = *slope;
            let xv = nodes[x.0].value.data();
            acc(nodes, grads, *x, |d| {
                for i in 0..d.len() {
                    let factor = if xv[i] > F::zero() { F::one() } else { slope };
                    d[i] = d[i] + g[i] * factor;
                }
            });
        }
        Op::Softmax { x, axis } => {
            let y = nodes[id].value.data();
            let shape = nodes[id].value.shape();
            let lane = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            acc(nodes, grads, *x, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * lane + l) * inner + i;
                        let mut dot = F::zero();
                        for l in 0..lane {
                            dot = dot + g[idx(l)] * y[idx(l)];
                        }
                        for l in 0..lane {
                            d[idx(l)] = d[idx(l)] + y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let e = nodes[gamma.0].value.numel();
            let rows = xhat.len() / e;
            let gv = nodes[gamma.0].value.data();
            let ef = sc::<F>(e as f64);
            acc(nodes, grads, *gamma, |d| {
                for r in 0..rows {
                    for j in 0..e {
                        d[j] = d[j] + g[r * e + j] * xhat[r * e + j];
                    }
                }
            });
            acc(nodes, grads, *beta, |d| {
                for r in 0..rows {
                    for j in 0..e {
                        d[j] = d[j] + g[r * e + j];
                    }
                }
            });
            acc(nodes, grads, *x, |d| {
                for r in 0..rows {
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..e {
                        let dxh = g[r * e + j] * gv[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xhat[r * e + j];
                    }
                    m1 = m1 / ef;
                    m2 = m2 / ef;
                    for j in 0..e {
                        let dxh = g[r * e + j] * gv[j];
                        d[r * e + j] =
                            d[r * e + j] + inv_std[r] * (dxh - m1 - xhat[r * e + j] * m2);
                    }
                }
            });
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = nodes[gamma.0].value.numel();
            let rows = xhat.len() / c;
            let gv = nodes[gamma.0].value.data();
            let rf = sc::<F>(rows as f64);
            acc(nodes, grads, *gamma, |d| {
                for r in 0..rows {
                    for j in 0..c {
                        d[j] = d[j] + g[r * c + j] * xhat[r * c + j];
                    }
                }
            });
            acc(nodes, grads, *beta, |d| {
                for r in 0..rows {
                    for j in 0..c {
                        d[j] = d[j] + g[r * c + j];
                    }
                }
            });
            acc(nodes, grads, *x, |d| {
                let mut sum_dxh = vec![F::zero(); c];
                let mut sum_dxh_xhat = vec![F::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        let dxh = g[r * c + j] * gv[j];
                        sum_dxh[j] = sum_dxh[j] + dxh;
                        sum_dxh_xhat[j] = sum_dxh_xhat[j] + dxh * xhat[r * c + j];
                    }
                }
                for r in 0..rows {
                    for j in 0..c {
                        let dxh = g[r * c + j] * gv[j];
                        d[r * c + j] = d[r * c + j]
                            + inv_std[j] / rf
                                * (rf * dxh - sum_dxh[j] - xhat[r * c + j] * sum_dxh_xhat[j]);
                    }
                }
            });
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = nodes[gamma.0].value.numel();
            let rows = xhat.len() / c;
            let gv = nodes[gamma.0].value.data();
            acc(nodes, grads, *gamma, |d| {
                for r in 0..rows {
                    for j in 0..c {
                        d[j] = d[j] + g[r * c + j] * xhat[r * c + j];
                    }
                }
            });
            acc(nodes, grads, *beta, |d| {
                for r in 0..rows {
                    for j in 0..c {
                        d[j] = d[j] + g[r * c + j];
                    }
                }
            });
            acc(nodes, grads, *x, |d| {
                for r in 0..rows {
                    for j in 0..c {
                        d[r * c + j] = d[r * c + j] + g[r * c + j] * gv[j] * inv_std[j];
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0usize;
            for &p in parts {
                let numel = nodes[p.0].value.numel();
                let seg = &g[offset..offset + numel];
                acc(nodes, grads, p, |d| {
                    for (o, &gi) in d.iter_mut().zip(seg) {
                        *o = *o + gi;
                    }
                });
                offset += numel;
            }
        }
        Op::SliceRows { x, start } => {
            let (_, cols) = nodes[x.0].value.dims2().unwrap();
            let offset = start * cols;
            acc(nodes, grads, *x, |d| {
                for (i, &gi) in g.iter().enumerate() {
                    d[offset + i] = d[offset + i] + gi;
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total: usize = parts
                .iter()
                .map(|&p| nodes[p.0].value.dims2().unwrap().1)
                .sum();
            let mut offset = 0usize;
            for &p in parts {
                let (rows, w) = nodes[p.0].value.dims2().unwrap();
                acc(nodes, grads, p, |d| {
                    for r in 0..rows {
                        for j in 0..w {
                            d[r * w + j] = d[r * w + j] + g[r * total + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::SliceCols { x, start } => {
            let (rows, cols) = nodes[x.0].value.dims2().unwrap();
            let w = nodes[id].value.dims2().unwrap().1;
            let start = *start;
            acc(nodes, grads, *x, |d| {
                for r in 0..rows {
                    for j in 0..w {
                        d[r * cols + start + j] = d[r * cols + start + j] + g[r * w + j];
                    }
                }
            });
        }
        Op::Reshape(x) => {
            acc(nodes, grads, *x, |d| {
                for (o, &gi) in d.iter_mut().zip(g) {
                    *o = *o + gi;
                }
            });
        }
        Op::Sum(x) => {
            let g0 = g[0];
            acc(nodes, grads, *x, |d| {
                for o in d.iter_mut() {
                    *o = *o + g0;
                }
            });
        }
        Op::Mean(x) => {
            let n = sc::<F>(nodes[x.0].value.numel() as f64);
            let g0 = g[0] / n;
            acc(nodes, grads, *x, |d| {
                for o in d.iter_mut() {
                    *o = *o + g0;
                }
            });
        }
        Op::WeightedCrossEntropy {
            logits,
            labels,
            weights,
            probs,
        } => {
            let (n, k) = nodes[logits.0].value.dims2().unwrap();
            let weight_sum = labels
                .iter()
                .map(|&l| weights[l])
                .fold(F::zero(), |a, b| a + b);
            let g0 = g[0];
            acc(nodes, grads, *logits, |d| {
                for i in 0..n {
                    let w = weights[labels[i]] / weight_sum;
                    for j in 0..k {
                        let target = if j == labels[i] { F::one() } else { F::zero() };
                        d[i * k + j] = d[i * k + j] + g0 * w * (probs[i * k + j] - target);
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(&[rows, cols], v).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(x^2) -> grad = 2x
        let mut tape = Tape::new();
        let x = tape.param(t2(1, 4, &[1.0, -2.0, 3.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g, &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn fanout_accumulates() {
        // y = x + x -> dy/dx = 2
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0f64));
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t2(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        // K=1, stride=1, weight 1, bias 0 -> identity
        let mut tape = Tape::new();
        let x = tape.leaf(t2(4, 1, &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(Tensor::from_f64_slice(&[1, 1, 1], &[1.0]).unwrap());
        let b = tape.leaf(Tensor::from_f64_slice(&[1], &[0.0]).unwrap());
        let y = tape.conv1d(x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_hand_example() {
        // input [1,2,3,4], K=2, stride=2, kernel [1,1] -> [3, 7]
        let mut tape = Tape::new();
        let x = tape.leaf(t2(4, 1, &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(Tensor::from_f64_slice(&[1, 1, 2], &[1.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::from_f64_slice(&[1], &[0.0]).unwrap());
        let y = tape.conv1d(x, w, b, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1]);
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn conv_output_length_matches_window_arithmetic() {
        // 3000 samples, K=50, stride=50 -> 60 windows
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[3000, 1]));
        let w = tape.leaf(Tensor::<f64>::zeros(&[4, 1, 50]));
        let b = tape.leaf(Tensor::<f64>::zeros(&[4]));
        let y = tape.conv1d(x, w, b, 50).unwrap();
        assert_eq!(tape.value(y).shape(), &[60, 4]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(&[10, 2]));
        let w = tape.leaf(Tensor::<f64>::zeros(&[4, 3, 2]));
        let b = tape.leaf(Tensor::<f64>::zeros(&[4]));
        assert!(matches!(tape.conv1d(x, w, b, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(2, 3, &[0.3, -1.0, 2.5, 1000.0, 1000.0, 999.0]));
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_hand_example() {
        // row [1,3], gamma=1, beta=0, eps->0 => [-1, 1]
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 2, &[1.0, 3.0]));
        let gamma = tape.leaf(Tensor::from_f64_slice(&[2], &[1.0, 1.0]).unwrap());
        let beta = tape.leaf(Tensor::from_f64_slice(&[2], &[0.0, 0.0]).unwrap());
        let y = tape.layer_norm(x, gamma, beta, 1e-12).unwrap();
        assert!((tape.value(y).data()[0] + 1.0).abs() < 1e-6);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_row_and_gamma_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 3, &[5.0, 5.0, 5.0]));
        let g1 = tape.leaf(Tensor::from_f64_slice(&[3], &[1.0, 1.0, 1.0]).unwrap());
        let b0 = tape.leaf(Tensor::<f64>::zeros(&[3]));
        let y = tape.layer_norm(x, g1, b0, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));

        let g0 = tape.leaf(Tensor::<f64>::zeros(&[3]));
        let beta = tape.leaf(Tensor::from_f64_slice(&[3], &[0.5, -1.0, 2.0]).unwrap());
        let y = tape.layer_norm(x, g0, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn batch_norm_hand_example() {
        // channel values [0,0,2,2] -> [-1,-1,1,1] before affine (eps->0)
        let mut tape = Tape::new();
        let x = tape.leaf(t2(4, 1, &[0.0, 0.0, 2.0, 2.0]));
        let gamma = tape.leaf(Tensor::from_f64_slice(&[1], &[1.0]).unwrap());
        let beta = tape.leaf(Tensor::<f64>::zeros(&[1]));
        let (y, stats) = tape.batch_norm_train(x, gamma, beta, 1e-12).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-6 && (v[3] - 1.0).abs() < 1e-6);
        assert!((stats.mean[0] - 1.0).abs() < 1e-12);
        assert!((stats.var[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_matches_train_when_stats_equal() {
        let vals = [0.5, -1.5, 2.0, 0.25];
        let mut tape = Tape::new();
        let x = tape.leaf(t2(4, 1, &vals));
        let gamma = tape.leaf(Tensor::from_f64_slice(&[1], &[1.3]).unwrap());
        let beta = tape.leaf(Tensor::from_f64_slice(&[1], &[-0.2]).unwrap());
        let (y_train, stats) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        let y_eval = tape
            .batch_norm_eval(x, gamma, beta, &stats.mean, &stats.var, 1e-5)
            .unwrap();
        assert_eq!(tape.value(y_train).data(), tape.value(y_eval).data());
    }

    #[test]
    fn weighted_cross_entropy_uniform_logits() {
        // uniform logits, unit weights -> ln 5
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::<f64>::zeros(&[3, 5]));
        let loss = tape
            .weighted_cross_entropy(logits, &[0, 2, 4], &[1.0; 5])
            .unwrap();
        assert!((tape.value(loss).data()[0] - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_cross_entropy_weighted_mean() {
        // two samples, labels N1 (w=2) and W (w=1): loss = (2 l_n1 + 1 l_w) / 3
        let logits = [0.7, -0.3, 0.1, 0.0, 0.2, -0.5, 1.1, 0.3, 0.0, -0.2];
        let weights = [1.0, 2.0, 1.0, 2.0, 2.0];
        let mut tape = Tape::new();
        let lv = tape.leaf(t2(2, 5, &logits));
        let loss = tape.weighted_cross_entropy(lv, &[1, 0], &weights).unwrap();

        let per_sample = |row: &[f64], label: usize| {
            let p = crate::tensor::softmax(row);
            -p[label].ln()
        };
        let expected =
            (2.0 * per_sample(&logits[..5], 1) + 1.0 * per_sample(&logits[5..], 0)) / 3.0;
        assert!((tape.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn weighted_cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::<f64>::zeros(&[1, 5]));
        assert!(tape
            .weighted_cross_entropy(logits, &[5], &[1.0; 5])
            .is_err());
    }

    #[test]
    fn matmul_and_transpose_backward() {
        // loss = sum(A . B), check against hand gradients
        let mut tape = Tape::new();
        let a = tape.param(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t2(2, 2, &[0.5, -1.0, 2.0, 1.5]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        // dA[i,p] = sum_j B[p,j], dB[p,j] = sum_i A[i,p]
        assert_eq!(tape.grad(a).unwrap(), &[-0.5, 3.5, -0.5, 3.5]);
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }
}
