use std::collections::BTreeMap;

use super::{GradMap, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay. Only trainable parameters with a gradient
/// entry are touched.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradMap<T>) {
        self.step_all(&mut [store], grads);
    }

    /// One update over several stores that share a gradient map (e.g. side
    /// network plus a fine-tuned backbone).
    pub fn step_all(&mut self, stores: &mut [&mut ParamStore<T>], grads: &GradMap<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = T::lit(self.cfg.lr);
        let eps = T::lit(self.cfg.eps);
        for p in stores.iter_mut().flat_map(|s| s.iter_mut()).filter(|p| p.trainable) {
            let Some(g) = grads.get(&p.name) else {
                continue;
            };
            let n = p.tensor.numel();
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
