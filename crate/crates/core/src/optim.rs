//! SGD with momentum and weight decay, plus the step learning-rate schedule.

use crate::error::{AibError, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

/// `base_lr * factor^floor(epoch / step_epochs)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub step_epochs: usize,
    pub factor: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64) -> Self {
        LrSchedule {
            base_lr,
            step_epochs: 25,
            factor: 0.5,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = (epoch / self.step_epochs.max(1)) as i32;
        self.base_lr * self.factor.powi(halvings)
    }
}

/// Halves `base_lr` every 25 epochs.
pub fn lr_schedule(epoch: usize, base_lr: f64) -> f64 {
    LrSchedule::new(base_lr).lr_at(epoch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub velocity: Vec<Tensor>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epoch: usize,
}

impl OptimState {
    pub fn new(params: &ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimState {
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            lr,
            momentum,
            weight_decay,
            epoch: 0,
        }
    }
}

/// `v <- momentum * v + (grad + wd * param)`, `param <- param - lr * v`.
/// Parameters whose role does not decay skip the `wd * param` term.
pub fn sgd_step(params: &mut ParamStore, grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(AibError::Dimension(format!(
            "sgd_step: {} params, {} grads, {} momentum buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if g.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(AibError::Shape {
                name: p.name.clone(),
                expected: p.value.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        let wd = if p.role.decays() { state.weight_decay } else { 0.0 };
        for ((w, &dw), vel) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vel = state.momentum * *vel + (dw + wd * *w);
            *w -= state.lr * *vel;
        }
    }
    Ok(())
}
