//! Adaptive-moment optimizer over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Moments<T: Scalar> {
    m: Tensor<T>,
    v: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, state: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter named in `grads`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let value = store.get_mut(name).expect("gradient for unknown parameter");
            assert_eq!(value.shape(), g.shape(), "gradient shape for {name}");
            let st = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Moments { m: Tensor::zeros(g.shape()), v: Tensor::zeros(g.shape()) });
            for (((p, &gv), m), v) in
                value.data_mut().iter_mut().zip(g.data()).zip(st.m.data_mut()).zip(st.v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * gv;
                *v = b2 * *v + (T::one() - b2) * gv * gv;
                *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new(0);
        store.declare("w", &[2], Init::Zeros);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(&[2], vec![3.0, -0.5]))]);
        opt.step(&mut store, &grads);
        let w = store.value("w").data();
        assert!((w[0] + 0.1).abs() < 1e-6 && (w[1] - 0.1).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new(0);
        store.declare("w", &[1], Init::Constant(5.0));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..500 {
            let w = store.value("w").data()[0];
            let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(&[1], vec![2.0 * (w - 1.0)]))]);
            opt.step(&mut store, &grads);
        }
        assert!((store.value("w").data()[0] - 1.0).abs() < 1e-2);
    }
}
