use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::params::{missing_grad, ParamStore};
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| alloc::vec![0.0; p.value.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    /// One update of every parameter. Every parameter must carry a gradient;
    /// parameters that do not influence the loss should receive explicit zeros.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, weight_decay: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Config(alloc::format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(missing_grad(p));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let grad = p.grad.as_ref().expect("checked above").data().to_vec();
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * (mh / (libm::sqrt(vh) + self.eps) + weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Fills any missing gradient with zeros so every parameter can be stepped.
pub fn fill_missing_grads(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if p.grad.is_none() {
            p.grad = Some(super::Tensor::zeros(p.value.shape()));
        }
    }
}
