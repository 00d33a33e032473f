use std::f64::consts::PI;

use super::params::ParamStore;
use super::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// First/second moment accumulators, one pair per parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |p: &super::Param| vec![0.0; p.value.len()];
        Self {
            config,
            step: 0,
            m: store.params().iter().map(zeros).collect(),
            v: store.params().iter().map(zeros).collect(),
        }
    }

    /// One bias-corrected Adam update of every trainable parameter from its `grad`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(TensorError::Invalid {
                kernel: "adam",
                msg: format!("state tracks {} params, store has {}", self.m.len(), store.len()),
            });
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(TensorError::StepOutOfRange { step, total });
    }
    let progress = step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * progress).cos()))
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(TensorError::Invalid {
            kernel: "clip_global_norm",
            msg: format!("max_norm must be positive, got {max_norm}"),
        });
    }
    let norm = global_grad_norm(store);
    if norm > max_norm {
        let mut s = max_norm / norm;
        // rounding can leave the rescaled norm a few ulps above the bound
        loop {
            let scaled = store
                .params()
                .iter()
                .flat_map(|p| p.grad.iter())
                .map(|g| (g * s) * (g * s))
                .sum::<f64>()
                .sqrt();
            if scaled <= max_norm {
                break;
            }
            s *= 1.0 - f64::EPSILON * 4.0;
        }
        for p in store.params_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    Ok(norm)
}

pub(crate) fn global_grad_norm(store: &ParamStore) -> f64 {
    store.params().iter().flat_map(|p| p.grad.iter()).map(|g| g * g).sum::<f64>().sqrt()
}
