//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lr, self.beta1, self.beta2, self.eps, self.weight_decay]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.beta1 < 1.0
            && self.beta2 < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {:?}", self)))
        }
    }
}

/// Moments for every parameter of a [`ParamSet`], index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW { config, step: 0, m: zeros(), v: zeros() }
    }

    /// One update at learning rate `lr`. `grads[i]` of `None` (or a frozen
    /// parameter) leaves parameter `i` and its moments untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape {
                op: "adamw",
                detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            });
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - math::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - math::pow(c.beta2, self.step as f64);
        for (i, g) in grads.iter().enumerate() {
            let id = crate::params::ParamId(i);
            let Some(g) = g else { continue };
            let (trainable, decay) = {
                let p = params.get(id);
                (p.trainable, p.decay)
            };
            if !trainable {
                continue;
            }
            if g.shape() != self.m[i].shape() || g.shape() != params.value(id).shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    detail: format!("{}: grad {:?} vs param {:?}", params.get(id).name, g.shape(), params.value(id).shape()),
                });
            }
            let wd = if decay { c.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.value_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * (wd * p[j] + mh / (math::sqrt(vh) + c.eps));
            }
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(Tensor::round_to_f32);
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Invalid("cosine schedule needs total_steps > 0".into()));
    }
    let t = step.min(total) as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math::cos(math::PI * t)))
}
