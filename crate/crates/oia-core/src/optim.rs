//! Adam with weight decay and a step-decay learning-rate schedule.

use crate::error::{OiaError, Result};
use crate::tensor::Tensor;

/// Step-decay schedule: lr(e) = base_lr / decay_factor^floor(e / decay_every).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_epochs: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl Default for Schedule {
    /// 50 epochs at base rate 1e-3, divided by 10 every 10 epochs.
    fn default() -> Self {
        Schedule {
            base_lr: 1e-3,
            total_epochs: 50,
            decay_every: 10,
            decay_factor: 10.0,
        }
    }
}

impl Schedule {
    pub fn with_epochs(total_epochs: usize) -> Self {
        Schedule {
            total_epochs,
            ..Schedule::default()
        }
    }

    pub fn lr_at_epoch(&self, e: usize) -> Result<f64> {
        if e >= self.total_epochs {
            return Err(OiaError::Config(format!(
                "epoch {e} out of schedule range 0..{}",
                self.total_epochs
            )));
        }
        Ok(self.base_lr / self.decay_factor.powi((e / self.decay_every) as i32))
    }
}

/// Adam hyperparameters. Weight decay is coupled L2 by default (added to the
/// raw gradient before the moment updates); `decoupled` switches to applying
/// the decay directly on the parameters instead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decoupled: false,
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    /// Moment buffers sized to match `params`, all zeros, step counter 0.
    pub fn new(params: &[&Tensor], hyper: AdamHyper) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
            hyper,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update across all parameter tensors. `grads[i]` must match
    /// `params[i]` element for element.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OiaError::shape(
                "adam_step",
                format!(
                    "{} params / {} grads vs {} state buffers",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if grads[i].len() != p.numel() || self.m[i].len() != p.numel() {
                return Err(OiaError::shape(
                    "adam_step",
                    format!(
                        "tensor {i}: {} values, {} gradient entries, {} moments",
                        p.numel(),
                        grads[i].len(),
                        self.m[i].len()
                    ),
                ));
            }
        }
        self.t += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let theta = p.values_mut();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..theta.len() {
                let g = if h.decoupled {
                    grads[i][j]
                } else {
                    grads[i][j] + h.weight_decay * theta[j]
                };
                m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g;
                v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                theta[j] -= lr * m_hat / (v_hat.sqrt() + h.eps);
                if h.decoupled {
                    theta[j] -= lr * h.weight_decay * theta[j];
                }
            }
        }
        Ok(())
    }
}
