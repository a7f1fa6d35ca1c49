//! Adam with bias correction over a [`ParamStore`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const DEFAULT_LR: f64 = 0.0004;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Moment estimates and step count; serialized into checkpoints for resuming.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<Moment>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_state(config: AdamConfig, state: AdamState) -> Self {
        Self {
            config,
            step: state.step,
            moments: state
                .moments
                .into_iter()
                .map(|m| (m.name, (m.m, m.v)))
                .collect(),
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            step: self.step,
            moments: self
                .moments
                .iter()
                .map(|(name, (m, v))| Moment {
                    name: name.clone(),
                    m: m.clone(),
                    v: v.clone(),
                })
                .collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn has_moments_for(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// Applies one update from the grad slots of every non-frozen entry.
    ///
    /// Gradients are validated before any parameter is touched, so a
    /// non-finite gradient leaves the store unchanged. Entries without a grad
    /// slot did not take part in the loss and are skipped.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (name, p) in store.entries() {
            if store.is_frozen(name) {
                continue;
            }
            if let Some(g) = p.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(name.to_string()));
                }
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);

        let trainable: Vec<String> = store
            .names()
            .filter(|n| !store.is_frozen(n))
            .map(str::to_string)
            .collect();
        for name in trainable {
            let p = store.get_mut(&name).expect("listed entry");
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / correct1;
                let v_hat = *vi / correct2;
                *x -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{PHOTO_ENCODER, RECONSTRUCTOR};
    use crate::tensor::NumArray;

    fn store_with_grads(g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(PHOTO_ENCODER, "a", NumArray::vector(vec![1.0]));
        s.insert(RECONSTRUCTOR, "b", NumArray::vector(vec![2.0, -1.0]));
        s.accumulate_grad("a", &[g]).unwrap();
        s.accumulate_grad("b", &[g, g]).unwrap();
        s
    }

    #[test]
    fn default_learning_rate() {
        assert_eq!(AdamConfig::default().lr, 0.0004);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut s = store_with_grads(0.0);
        let before = s.clone();
        Adam::new(AdamConfig::default()).step(&mut s).unwrap();
        for (name, p) in s.entries() {
            assert_eq!(p.data(), before.get(name).unwrap().data());
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε).
        let mut s = store_with_grads(0.5);
        let cfg = AdamConfig::default();
        Adam::new(cfg).step(&mut s).unwrap();
        let expected = 1.0 - cfg.lr * 0.5 / (0.5 + cfg.epsilon);
        assert!((s.get("a").unwrap().data()[0] - expected).abs() < 1e-15);
        assert!((s.get("a").unwrap().data()[0] - (1.0 - cfg.lr)).abs() < 1e-10);
    }

    #[test]
    fn frozen_group_untouched() {
        let mut s = store_with_grads(0.3);
        s.freeze(RECONSTRUCTOR);
        let before = s.get("b").unwrap().data().to_vec();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut s).unwrap();
        }
        let after: Vec<u64> = s.get("b").unwrap().data().iter().map(|x| x.to_bits()).collect();
        let expect: Vec<u64> = before.iter().map(|x| x.to_bits()).collect();
        assert_eq!(after, expect);
        assert!(!adam.has_moments_for("b"));
        assert!(adam.has_moments_for("a"));
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store_with_grads(0.1);
        s.accumulate_grad("b", &[f64::NAN, 0.0]).unwrap();
        let before = s.clone();
        let err = Adam::new(AdamConfig::default()).step(&mut s).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "b"));
        for name in ["a", "b"] {
            assert_eq!(s.get(name).unwrap().data(), before.get(name).unwrap().data());
        }
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let mut a = store_with_grads(0.2);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut a).unwrap();
        let mut resumed = Adam::from_state(adam.config, adam.state());
        let mut b = a.clone();
        adam.step(&mut a).unwrap();
        resumed.step(&mut b).unwrap();
        assert_eq!(a, b);
    }
}
