//! AdamW with decoupled weight decay.

use crate::config::RunConfig;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub struct AdamW<S> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u32,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: &RunConfig, store: &ParamStore<S>) -> Self {
        let buffers = |_| {
            store
                .ids()
                .map(|id| vec![S::zero(); store.tensor(id).numel()])
                .collect::<Vec<_>>()
        };
        AdamW {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            step: 0,
            m: buffers(0),
            v: buffers(1),
        }
    }

    /// One optimizer step; `grads` is indexed by parameter id, `None` means
    /// no gradient flowed this step (the moment buffers still decay).
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<Vec<S>>]) {
        self.step += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(self.eps);
        let wd = S::from_f64(self.weight_decay);
        let bc1 = S::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = S::from_f64(1.0 - self.beta2.powi(self.step as i32));
        for (idx, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let id = ParamId(idx);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = store.tensor_mut(id).data_mut();
            for (((p, &g), mi), vi) in data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p = *p - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let mut config = RunConfig::default();
        config.learning_rate = 0.0;
        let mut store: ParamStore<f32> = ParamStore::new();
        store.register("w", Tensor::new(vec![2], vec![1.5, -0.25]).unwrap());
        let before = store.tensor(ParamId(0)).clone();
        let mut opt = AdamW::new(&config, &store);
        opt.step(&mut store, &[Some(vec![3.0, -1.0])]);
        let after = store.tensor(ParamId(0));
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before), bits(after));
    }

    #[test]
    fn gradient_descends_a_quadratic() {
        let mut config = RunConfig::default();
        config.learning_rate = 0.1;
        config.weight_decay = 0.0;
        let mut store: ParamStore<f64> = ParamStore::new();
        store.register("w", Tensor::new(vec![1], vec![4.0]).unwrap());
        let mut opt = AdamW::new(&config, &store);
        for _ in 0..200 {
            let w = store.tensor(ParamId(0)).item();
            opt.step(&mut store, &[Some(vec![2.0 * w])]);
        }
        assert!(store.tensor(ParamId(0)).item().abs() < 0.1);
    }
}
