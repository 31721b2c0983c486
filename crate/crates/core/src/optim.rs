use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are created lazily per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(name).expect("checked above");
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !p.is_finite() {
                return Err(Error::NonFinite("adam_step"));
            }
        }
        Ok(())
    }

    /// Moments as a flat store (`m.<name>`, `v.<name>`) for checkpointing.
    pub fn moments(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for (k, t) in &self.first {
            s.insert(&format!("m.{k}"), t.clone())?;
        }
        for (k, t) in &self.second {
            s.insert(&format!("v.{k}"), t.clone())?;
        }
        Ok(s)
    }

    pub fn restore(config: AdamConfig, step: u64, moments: &ParamStore) -> Result<Self> {
        let mut state = AdamState::new(config);
        state.step = step;
        for (name, t) in moments.iter() {
            if let Some(k) = name.strip_prefix("m.") {
                state.first.insert(k.to_string(), t.clone());
            } else if let Some(k) = name.strip_prefix("v.") {
                state.second.insert(k.to_string(), t.clone());
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer entry `{name}`")));
            }
        }
        Ok(state)
    }
}
