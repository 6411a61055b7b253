//! AdamW: Adam with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Array, Array)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates for `name`, once it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&Array, &Array)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }

    /// One update over every parameter that has a gradient in `grads`.
    /// Parameters absent from `grads` are left untouched.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &BTreeMap<String, Array>) -> Result<()> {
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2_sqrt = (1.0 - beta2.powi(self.step as i32)).sqrt();
        let step_size = lr / bc1;

        for store in stores.iter_mut() {
            let names: Vec<String> = store.names().cloned().collect();
            for name in names {
                let Some(grad) = grads.get(&name) else { continue };
                let param = store.get_mut(&name).expect("name from store");
                if param.shape() != grad.shape() {
                    return Err(Error::shape(
                        "adamw",
                        format!("{name}: param {:?} vs grad {:?}", param.shape(), grad.shape()),
                    ));
                }
                let (m, v) = self
                    .moments
                    .entry(name)
                    .or_insert_with(|| (Array::zeros(param.shape()), Array::zeros(param.shape())));
                let decay = 1.0 - lr * weight_decay;
                for (((p, mi), vi), &gi) in param
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                    .zip(grad.data())
                {
                    *p *= decay;
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    let denom = vi.sqrt() / bc2_sqrt + eps;
                    *p -= step_size * *mi / denom;
                }
            }
        }
        Ok(())
    }
}
