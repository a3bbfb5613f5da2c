use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ema_decay: f64,
    /// Global gradient-norm bound; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    /// Decoupled weight decay, applied as `p *= 1 - lr * weight_decay`.
    pub weight_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ema_decay: 0.9999,
            clip_norm: 1.0,
            weight_decay: 0.001,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=1.0).contains(&self.ema_decay)
            && self.clip_norm > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Adam moments, step counter, current learning rate and EMA shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub settings: OptimizerSettings,
    pub lr: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub ema: Vec<f64>,
}

impl OptState {
    pub fn new(settings: OptimizerSettings, params: &[f64]) -> Self {
        Self {
            settings,
            lr: settings.base_lr,
            step: 0,
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            ema: params.to_vec(),
        }
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Clip by global norm, Adam with bias correction, decoupled weight decay,
/// then the EMA update.
pub fn step(params: &mut [f64], grads: &[f64], opt: &mut OptState) -> Result<()> {
    let n = params.len();
    if grads.len() != n || opt.m.len() != n || opt.ema.len() != n {
        return Err(Error::shape(format!("{n} gradients"), grads.len()));
    }
    let s = opt.settings;
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::Divergence(format!("gradient norm is {norm}")));
    }
    let scale = if norm > s.clip_norm {
        s.clip_norm / norm
    } else {
        1.0
    };

    opt.step += 1;
    let bc1 = 1.0 - s.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - s.beta2.powi(opt.step as i32);
    let lr = opt.lr;
    let decay = 1.0 - lr * s.weight_decay;
    for i in 0..n {
        let g = grads[i] * scale;
        opt.m[i] = s.beta1 * opt.m[i] + (1.0 - s.beta1) * g;
        opt.v[i] = s.beta2 * opt.v[i] + (1.0 - s.beta2) * g * g;
        let m_hat = opt.m[i] / bc1;
        let v_hat = opt.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + s.eps);
        params[i] *= decay;
        opt.ema[i] = s.ema_decay * opt.ema[i] + (1.0 - s.ema_decay) * params[i];
    }
    Ok(())
}

/// Linear anneal: `lr = base_lr * (1 - fraction_done)`.
pub fn anneal_lr(opt: &mut OptState, fraction_done: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction_done) {
        return Err(Error::domain(format!(
            "anneal fraction {fraction_done} outside [0, 1]"
        )));
    }
    opt.lr = opt.settings.base_lr * (1.0 - fraction_done);
    Ok(())
}
