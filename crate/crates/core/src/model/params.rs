//! Named parameter and buffer storage for model weights.
//!
//! Parameters are learnable; buffers (batch-norm running statistics) are
//! updated outside the gradient path. Registration order is the canonical
//! order for tape injection, optimizer state, and checkpoints.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{sc, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferId(pub(crate) usize);

/// A pending running-statistics update produced by one train-mode forward.
#[derive(Clone, Debug)]
pub struct BnUpdate<F> {
    pub mean: BufferId,
    pub var: BufferId,
    pub seen: BufferId,
    pub stats: BatchStats<F>,
}

pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> BufferId {
        self.buffer_names.push(name.into());
        self.buffers.push(tensor);
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn buffers(&self) -> &[Tensor<F>] {
        &self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn param_by_index(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    pub fn param_by_index_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.tensors[i]
    }

    pub fn set_param(&mut self, id: ParamId, tensor: Tensor<F>) {
        assert_eq!(self.tensors[id.0].shape(), tensor.shape());
        self.tensors[id.0] = tensor;
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<F> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<F> {
        &mut self.buffers[id.0]
    }

    pub fn set_buffer_by_index(&mut self, i: usize, tensor: Tensor<F>) {
        assert_eq!(self.buffers[i].shape(), tensor.shape());
        self.buffers[i] = tensor;
    }

    /// Total learnable scalars.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Put every parameter on `tape` as a trainable leaf, in registration
    /// order, so `ParamId(i)` maps to slot `i` of the returned vector.
    pub fn inject(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Fold batch statistics into the running estimates:
    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<F>], momentum: f64) {
        let m = sc::<F>(momentum);
        let keep = F::one() - m;
        for u in updates {
            for (slot, &batch) in self.buffers[u.mean.0]
                .data_mut()
                .iter_mut()
                .zip(&u.stats.mean)
            {
                *slot = keep * *slot + m * batch;
            }
            for (slot, &batch) in self.buffers[u.var.0]
                .data_mut()
                .iter_mut()
                .zip(&u.stats.var)
            {
                *slot = keep * *slot + m * batch;
            }
            let seen = self.buffers[u.seen.0].data_mut();
            seen[0] = seen[0] + F::one();
        }
    }
}

/// He-style normal initialization for weights feeding a LeakyReLU.
pub fn init_he<F: Scalar>(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    init_normal(rng, shape, std)
}

pub fn init_normal<F: Scalar>(rng: &mut ChaCha20Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("std must be finite");
    let numel: usize = shape.iter().product();
    let data: Vec<F> = (0..numel).map(|_| sc(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Uniform in [-bound, bound], used for classifier layers.
pub fn init_uniform<F: Scalar>(rng: &mut ChaCha20Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    let numel: usize = shape.iter().product();
    let data: Vec<F> = (0..numel).map(|_| sc(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}
