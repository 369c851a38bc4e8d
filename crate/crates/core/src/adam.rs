//! Adam with L2-coupled weight decay: the decay term is added to the raw
//! gradient before the moment updates.

use crate::model::ParamStore;
use crate::tensor::{sc, Scalar};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

pub struct Adam<F> {
    cfg: AdamConfig,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: u64,
}

impl<F: Scalar> Adam<F> {
    /// Moment buffers are allocated to match the store's parameter shapes.
    pub fn new(cfg: AdamConfig, store: &ParamStore<F>) -> Self {
        let m = store
            .tensors()
            .iter()
            .map(|t| vec![F::zero(); t.numel()])
            .collect();
        let v = store
            .tensors()
            .iter()
            .map(|t| vec![F::zero(); t.numel()])
            .collect();
        Self {
            cfg,
            m,
            v,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// One update over every parameter. `grads[i]` holds the gradient for
    /// parameter `i` (missing entries are treated as zero gradient).
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Vec<F>>]) {
        assert_eq!(grads.len(), store.len(), "gradient slots vs parameters");
        self.step += 1;
        let lr = sc::<F>(self.cfg.lr);
        let b1 = sc::<F>(self.cfg.beta1);
        let b2 = sc::<F>(self.cfg.beta2);
        let eps = sc::<F>(self.cfg.eps);
        let wd = sc::<F>(self.cfg.weight_decay);
        let corr1 = F::one() - sc::<F>(self.cfg.beta1.powi(self.step as i32));
        let corr2 = F::one() - sc::<F>(self.cfg.beta2.powi(self.step as i32));
        for i in 0..store.len() {
            let param = store.param_by_index_mut(i);
            let data = param.data_mut();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                let raw = grads[i].as_ref().map(|g| g[j]).unwrap_or(F::zero());
                let g = raw + wd * data[j];
                m[j] = b1 * m[j] + (F::one() - b1) * g;
                v[j] = b2 * v[j] + (F::one() - b2) * g * g;
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                data[j] = data[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Serialize moments and step counter for training-state checkpoints.
    pub fn state(&self) -> (u64, &[Vec<F>], &[Vec<F>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<F>>, v: Vec<Vec<F>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_param_store(value: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.add_param("p", Tensor::scalar(value));
        store
    }

    #[test]
    fn first_step_is_minus_lr() {
        // theta = 0, g = 1: bias-corrected m_hat/sqrt(v_hat) = 1, so the first
        // step moves by about -lr.
        let mut store = single_param_store(0.0);
        let mut adam = Adam::new(
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        adam.step(&mut store, &[Some(vec![1.0])]);
        let p = store.param_by_index(0).data()[0];
        assert!((p + 1e-3).abs() < 1e-8, "got {p}");
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut store = single_param_store(0.7);
        let mut adam = Adam::new(
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        adam.step(&mut store, &[Some(vec![0.0])]);
        assert_eq!(store.param_by_index(0).data()[0], 0.7);
    }

    #[test]
    fn identical_steps_give_identical_results() {
        let run = || {
            let mut store = single_param_store(0.3);
            let mut adam = Adam::new(AdamConfig::default(), &store);
            adam.step(&mut store, &[Some(vec![0.5])]);
            adam.step(&mut store, &[Some(vec![-0.25])]);
            store.param_by_index(0).data()[0]
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn first_step_sign_matches_negative_gradient() {
        // With wd -> 0 the first bias-corrected update is sign descent.
        for &g in &[0.003, -1.7, 42.0, -0.0004] {
            let mut store = single_param_store(0.1);
            let mut adam = Adam::new(
                AdamConfig {
                    weight_decay: 0.0,
                    ..Default::default()
                },
                &store,
            );
            adam.step(&mut store, &[Some(vec![g])]);
            let delta = store.param_by_index(0).data()[0] - 0.1;
            assert!(delta.signum() == -g.signum(), "g={g} delta={delta}");
        }
    }
}
