//! Adam with an inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, ParamStore};

/// `base * min(step^-0.5, step * warmup^-1.5)`: linear warmup to
/// `base / sqrt(warmup)` at `step == warmup`, then inverse-sqrt decay.
pub fn lr_at(step: u64, base: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    base * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Bias-corrected Adam over every tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Element>(config: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients. Nothing changes
    /// if any gradient entry is non-finite.
    pub fn step<F: Element>(&mut self, store: &mut ParamStore<F>, lr: f64) -> Result<()> {
        for id in store.ids() {
            if let Some(index) = store.grad(id).iter().position(|g| !g.as_f64().is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: store.name(id).to_string(),
                    index,
                });
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((value, grad), (m, v)) in store
            .values_and_grads_mut()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *p = F::of(p.as_f64() - update);
            }
        }
        Ok(())
    }
}
