use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
    // Parameters that have only ever seen zero gradients have zero moments
    // and would receive a zero update; skipping them is exact.
    touched: bool,
}

/// Bias-corrected Adam with its own moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| Moments {
                first: vec![0.0; p.value.numel()],
                second: vec![0.0; p.value.numel()],
                touched: false,
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates of one parameter.
    pub fn moments(&self, id: crate::ParamId) -> (&[f64], &[f64]) {
        let m = &self.moments[id.index()];
        (&m.first, &m.second)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, state) in store.ids().zip(self.moments.iter_mut()) {
            let g = grads.get(id);
            if !state.touched {
                if g.iter().all(|&x| x == 0.0) {
                    continue;
                }
                state.touched = true;
            }
            let data = store.get_mut(id).value.data_mut();
            for i in 0..data.len() {
                let m = beta1 * state.first[i] + (1.0 - beta1) * g[i];
                let v = beta2 * state.second[i] + (1.0 - beta2) * g[i] * g[i];
                state.first[i] = m;
                state.second[i] = v;
                data[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            }
        }
    }
}

/// One independent [`Adam`] per named loss term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamBank {
    optimizers: BTreeMap<String, Adam>,
}

impl AdamBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(
        &mut self,
        name: &str,
        config: AdamConfig,
        store: &ParamStore,
    ) -> &mut Adam {
        self.optimizers
            .entry(name.to_string())
            .or_insert_with(|| Adam::new(config, store))
    }

    pub fn get(&self, name: &str) -> Option<&Adam> {
        self.optimizers.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.optimizers.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, Tensor};

    fn scalar_store(x: f64) -> (ParamStore, crate::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(x));
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut store, id) = scalar_store(0.7);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let grads = Gradients::for_store(&store);
        for _ in 0..10 {
            adam.step(&mut store, &grads);
        }
        assert_eq!(store.get(id).value.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = scalar_store(1.0);
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &store);
        let mut grads = Gradients::for_store(&store);
        let g = 0.37;
        grads.get_mut(id)[0] = g;
        adam.step(&mut store, &grads);
        // m_hat = g, v_hat = g^2 after bias correction.
        let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
        assert!((store.get(id).value.data()[0] - expected).abs() < 1e-15);
        assert!(((1.0 - store.get(id).value.data()[0]) - cfg.lr).abs() < 1e-9);
    }

    #[test]
    fn minimises_scalar_quadratic() {
        let (mut store, id) = scalar_store(1.0);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &store,
        );
        for _ in 0..200 {
            let mut grads = Gradients::for_store(&store);
            {
                let mut g = Graph::new(&store);
                let x = g.param(id);
                let sq = g.square(x);
                let l = g.sum(sq);
                g.backward(l, &mut grads).unwrap();
            }
            adam.step(&mut store, &grads);
        }
        assert!(store.get(id).value.data()[0].abs() < 1e-3);
    }

    #[test]
    fn bank_keeps_moments_separate() {
        let (mut store, id) = scalar_store(1.0);
        let mut bank = AdamBank::new();
        let mut grads = Gradients::for_store(&store);
        grads.get_mut(id)[0] = 1.0;
        let snapshot = store.clone();
        bank.get_or_insert("a", AdamConfig::default(), &snapshot)
            .step(&mut store, &grads);
        bank.get_or_insert("b", AdamConfig::default(), &snapshot);
        assert_eq!(bank.get("a").unwrap().step_count(), 1);
        assert_eq!(bank.get("b").unwrap().step_count(), 0);
        assert_eq!(bank.get("b").unwrap().moments(id).0, &[0.0]);
        assert_eq!(bank.names().collect::<Vec<_>>(), ["a", "b"]);
    }
}
