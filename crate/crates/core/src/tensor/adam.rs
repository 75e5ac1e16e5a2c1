use std::collections::HashMap;

use super::array::Tensor;
use super::params::{GradMap, ParamId, ParamStore};
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment tensors.
///
/// Moments are created lazily, so parameters added to the store after the
/// optimizer (e.g. a new rule head) start from zero moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(&id).map(|(m, v)| (m, v))
    }

    /// One update of every trainable parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &GradMap<T>) -> Result<()> {
        for id in params.trainable_ids() {
            let g = grads.get(&id).ok_or_else(|| {
                Error::invalid(format!("no gradient for parameter `{}`", params.name(id)))
            })?;
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "`{}` has shape {:?}, gradient {:?}",
                        params.name(id),
                        params.get(id).shape(),
                        g.shape()
                    ),
                ));
            }
        }
        self.step += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bias1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bias2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let ids: Vec<ParamId> = params.trainable_ids().collect();
        for id in ids {
            let g = &grads[&id];
            let shape = g.shape().to_vec();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(shape.clone()), Tensor::zeros(shape)));
            let p = params.get_mut(id).data_mut();
            for (((pi, mi), vi), &gi) in p
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bias1;
                let vhat = *vi / bias2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(value)).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut store = ParamStore::<f32>::new();
        let id = store
            .add("w", Tensor::from_f64([3], &[0.5, -1.25, 3.0]).unwrap())
            .unwrap();
        let before = store.get(id).clone();
        let mut adam = Adam::new(AdamConfig::default());
        let zeros = store.zero_grads();
        adam.step(&mut store, &zeros).unwrap();
        assert_eq!(store.get(id).data(), before.data());
        let (m, v) = adam.moments(id).unwrap();
        assert!(m.data().iter().chain(v.data()).all(|&x| x == 0.0));
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = single(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        let grads: GradMap<f64> = [(id, Tensor::scalar(1.0))].into();
        adam.step(&mut store, &grads).unwrap();
        // m̂ = 1, v̂ = 1, so the update is lr / (1 + eps)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((store.get(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_follow_scalar_recurrence() {
        let (mut store, id) = single(0.3);
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg);
        let gs = [0.7, -0.2];
        let (mut p, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            let grads: GradMap<f64> = [(id, Tensor::scalar(g))].into();
            adam.step(&mut store, &grads).unwrap();
            let t = (t + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        assert!((store.get(id).item() - p).abs() < 1e-15);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let (mut store, id) = single(0.0);
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let grads: GradMap<f64> = [(id, Tensor::zeros([2]))].into();
        assert!(adam.step(&mut store, &grads).is_err());
        assert_eq!(adam.step_count(), 0);
    }
}
