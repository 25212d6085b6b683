use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam over exactly the parameters that were trainable at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    state: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let state = store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let n = store.value(id).numel();
                (
                    id,
                    Moments {
                        m: vec![0.0; n],
                        v: vec![0.0; n],
                    },
                )
            })
            .collect();
        Self {
            config,
            step: 0,
            state,
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.state.keys().copied()
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state.get(&id)
    }

    pub fn moments_mut(&mut self, id: ParamId) -> Option<&mut Moments> {
        self.state.get_mut(&id)
    }

    /// One bias-corrected update. Parameters outside the optimizer's set are
    /// never touched; a missing gradient counts as zero.
    pub fn update(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Vec<f64>>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (&id, mom) in self.state.iter_mut() {
            let g = grads.get(&id);
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * gi;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * gi * gi;
                p[i] -= lr * (mom.m[i] / bc1) / ((mom.v[i] / bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(&store, AdamConfig::default());
        let grads = BTreeMap::from([(id, vec![0.5, -2.0])]);
        adam.update(&mut store, &grads, 0.1);
        let p = store.value(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_parameters_are_excluded() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0));
        let b = store.add("b", Tensor::scalar(1.0));
        store.set_frozen(b, true);
        let mut adam = Adam::new(&store, AdamConfig::default());
        assert_eq!(adam.param_ids().collect::<Vec<_>>(), vec![a]);
        let grads = BTreeMap::from([(a, vec![1.0]), (b, vec![1.0])]);
        adam.update(&mut store, &grads, 0.5);
        assert_eq!(store.value(b).data(), &[1.0]);
        assert_ne!(store.value(a).data(), &[1.0]);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![0.3, 0.7]).unwrap());
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..5 {
            adam.update(&mut store, &BTreeMap::from([(id, vec![1.0, -3.0])]), 0.0);
        }
        assert_eq!(store.value(id).data(), &[0.3, 0.7]);
    }
}
