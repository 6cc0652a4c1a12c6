use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip applied before the update; `None` disables it.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1e-2,
            momentum: 0.9,
            clip_norm: Some(5.0),
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    /// Applies one update from the gradients accumulated in `store`, then
    /// zeroes them. Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.velocity.len() != store.len() {
            self.velocity = store
                .iter()
                .map(|(_, p)| vec![0.0; p.value.len()])
                .collect();
        }
        if let Some(max) = self.config.clip_norm {
            let norm = store.grad_norm();
            if norm > max && norm.is_finite() {
                store.scale_grads(max / norm);
            }
        }
        let SgdConfig { lr, momentum, .. } = self.config;
        for (p, vel) in store.iter_mut().zip(&mut self.velocity) {
            if !p.trainable {
                continue;
            }
            for ((w, g), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&p.grad)
                .zip(vel.iter_mut())
            {
                *v = momentum * *v + g;
                *w -= lr * *v;
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Tape, Tensor};

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0), true).unwrap();
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            clip_norm: None,
        });
        for _ in 0..300 {
            let mut tape = Tape::new();
            let wv = tape.param(&store, w);
            let loss = tape.mul(wv, wv).unwrap();
            let g = tape.backward(loss).unwrap();
            store.accumulate(&g.params());
            opt.step(&mut store);
        }
        assert!(store.value(w).data()[0].abs() < 1e-6);
    }

    #[test]
    fn frozen_params_stay_bit_identical() {
        let mut store = ParamStore::new();
        let frozen = store.add("f", Tensor::scalar(0.123456789), false).unwrap();
        let w = store.add("w", Tensor::scalar(1.0), true).unwrap();
        let mut opt = Sgd::new(SgdConfig::default());
        for _ in 0..10 {
            let mut tape = Tape::new();
            let (fv, wv) = (tape.param(&store, frozen), tape.param(&store, w));
            let y = tape.mul(fv, wv).unwrap();
            let g = tape.backward(y).unwrap();
            store.accumulate(&g.params());
            opt.step(&mut store);
        }
        assert_eq!(
            store.value(frozen).data()[0].to_bits(),
            0.123456789f64.to_bits()
        );
    }
}
