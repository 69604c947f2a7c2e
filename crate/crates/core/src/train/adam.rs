use std::collections::BTreeMap;

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{contract, Result};

/// Adam with bias correction and a global gradient-norm cap.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, clip: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            clip,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn global_norm(grads: &ParamSet) -> f64 {
        grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Applies one update in place and returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<f64> {
        let norm = Self::global_norm(grads);
        if !norm.is_finite() {
            return Err(crate::Error::NonFinite { op: "adam" });
        }
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let p: &mut Tensor = params
                .get_mut(name)
                .ok_or_else(|| contract(format!("gradient for unknown parameter `{name}`")))?;
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}
