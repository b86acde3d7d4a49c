use std::collections::BTreeMap;

use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsPropConfig {
    pub lr: f64,
    /// Smoothing constant of the squared-gradient average.
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { lr: 1e-3, alpha: 0.99, eps: 1e-8 }
    }
}

/// RMSprop: `v <- a v + (1 - a) g^2; p <- p - lr g / (sqrt(v) + eps)`.
#[derive(Debug, Clone)]
pub struct RmsProp {
    cfg: RmsPropConfig,
    square_avg: BTreeMap<String, Vec<f64>>,
}

impl RmsProp {
    pub fn new(cfg: RmsPropConfig) -> Self {
        Self { cfg, square_avg: BTreeMap::new() }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        let RmsPropConfig { lr, alpha, eps } = self.cfg;
        for (name, value, grad) in store.iter_mut_with_grads() {
            let v = self
                .square_avg
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for ((p, &g), s) in value.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                *s = alpha * *s + (1.0 - alpha) * g * g;
                *p -= lr * g / (s.sqrt() + eps);
            }
        }
        store.zero_grads();
    }
}
