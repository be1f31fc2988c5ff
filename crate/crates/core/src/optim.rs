//! SGD with momentum and coupled weight decay under a polynomial learning
//! rate schedule.

use crate::nn::ParamSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub power: f64,
    pub max_iter: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-4,
            base_lr: 0.01,
            power: 0.9,
            max_iter: 1000,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight decay must be >= 0".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::InvalidArgument("base lr must be > 0".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter / max_iter)^power`
pub fn poly_lr(iter: usize, cfg: &SgdConfig) -> Result<f64> {
    if iter > cfg.max_iter {
        return Err(Error::InvalidArgument(format!(
            "iteration {iter} beyond max_iter {}",
            cfg.max_iter
        )));
    }
    Ok(cfg.base_lr * (1.0 - iter as f64 / cfg.max_iter as f64).powf(cfg.power))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: ParamSet,
    pub iter: usize,
}

impl SgdState {
    pub fn new(params: &ParamSet) -> Self {
        SgdState {
            velocity: params.zeros_like(),
            iter: 0,
        }
    }
}

/// One update: `g' = g + wd * w; v = momentum * v + g'; w -= lr(iter) * v`.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamSet, state: &mut SgdState, cfg: &SgdConfig) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.velocity) {
        return Err(Error::shape("parameters, gradients and velocity differ in layout"));
    }
    for (name, g) in grads.entries() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let lr = poly_lr(state.iter, cfg)?;
    let entries = params
        .entries_mut()
        .iter_mut()
        .zip(grads.entries())
        .zip(state.velocity.entries_mut());
    for (((_, w), (_, g)), (_, v)) in entries {
        for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            let g_eff = gi + cfg.weight_decay * *wi;
            *vi = cfg.momentum * *vi + g_eff;
            *wi -= lr * *vi;
        }
    }
    state.iter += 1;
    Ok(())
}
