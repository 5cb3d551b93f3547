use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decays, SefnetParams};

/// Gradient buffers keyed by parameter name.
pub type Grads = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers of Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    /// One update: `p ← p − lr·wd·p` for decaying parameters, then the
    /// bias-corrected Adam step.
    pub fn step(&mut self, params: &mut SefnetParams, grads: &Grads, lr: f64, weight_decay: f64) -> Result<()> {
        for name in params.names() {
            if !grads.contains_key(name) {
                return Err(Error::Internal(format!("no gradient for parameter {name}")));
            }
        }
        self.step += 1;
        let AdamHyper { beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, array) in params.iter_mut() {
            let g = &grads[name];
            if g.len() != array.numel() {
                return Err(Error::dim("adam", array.shape(), &[g.len()]));
            }
            let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            let decay = if decays(name) { lr * weight_decay } else { 0.0 };
            for (j, p) in array.values_mut().iter_mut().enumerate() {
                *p -= decay * *p;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
