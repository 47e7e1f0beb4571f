use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Updates every trainable entry of `store`. A parameter absent from
    /// `grads` is treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for name in grads.keys() {
            if !store.is_trainable(name) {
                return Err(Error::UnknownParam(name.clone()));
            }
        }
        self.step += 1;
        let names: Vec<String> = store.trainable().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let param = store.get_mut(&name)?;
            let n = param.len();
            let zeros;
            let grad = match grads.get(&name) {
                Some(g) => {
                    if g.shape() != param.shape() {
                        return Err(Error::Shape(format!(
                            "adam: gradient shape {:?} for parameter `{name}` of shape {:?}",
                            g.shape(),
                            param.shape()
                        )));
                    }
                    g.data()
                }
                None => {
                    zeros = vec![0.0; n];
                    &zeros
                }
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            adam_update(param.data_mut(), grad, m, v, self.step, &self.config, lr)?;
        }
        Ok(())
    }
}

/// One Adam update of a flat parameter slice. `step` is the 1-based count
/// including this update.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    let n = param.len();
    if grad.len() != n || m.len() != n || v.len() != n {
        return Err(Error::Shape(format!(
            "adam: lengths param={n} grad={} m={} v={}",
            grad.len(),
            m.len(),
            v.len()
        )));
    }
    if step == 0 {
        return Err(Error::InvalidInput("adam: step count starts at 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..n {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        param[i] -= lr * cfg.weight_decay * param[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Single-period cosine annealing from `base_lr` towards zero.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::InvalidInput(format!(
            "epoch {epoch} outside schedule of {total_epochs} epochs"
        )));
    }
    Ok(0.5 * base_lr * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos()))
}

/// Epoch-indexed cosine schedule.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_epochs: usize,
    pub epoch: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_epochs: usize) -> Self {
        Self { base_lr, total_epochs, epoch: 0 }
    }

    pub fn current(&self) -> Result<f64> {
        cosine_lr(self.epoch, self.total_epochs, self.base_lr)
    }

    pub fn advance(&mut self) {
        self.epoch += 1;
    }
}
