//! Plain stochastic gradient descent: `θ ← θ − α·∂L/∂θ` for every tensor.

use crate::backprop::{ensure_congruent, GradientSet, DEFAULT_CLIP_NORM};
use crate::cells::ModelParams;
use crate::error::{Error, Result};
use crate::linalg::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied once per epoch.
    pub decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            decay: 1.0,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// Learning rate after `epoch` rounds of decay: `α·decay^epoch`.
pub fn apply_decay(cfg: &OptimizerConfig, epoch: usize) -> OptimizerConfig {
    let exponent = i32::try_from(epoch).unwrap_or(i32::MAX);
    OptimizerConfig {
        learning_rate: cfg.learning_rate * cfg.decay.powi(exponent),
        ..*cfg
    }
}

/// Returns the updated parameters; `params` is left untouched.
pub fn sgd_step<T: Real>(params: &ModelParams<T>, grads: &GradientSet<T>, cfg: &OptimizerConfig) -> Result<ModelParams<T>> {
    let mut next = params.clone();
    sgd_step_in_place(&mut next, grads, cfg)?;
    Ok(next)
}

/// In-place variant of [`sgd_step`]. On error `params` is unchanged.
pub fn sgd_step_in_place<T: Real>(params: &mut ModelParams<T>, grads: &GradientSet<T>, cfg: &OptimizerConfig) -> Result<()> {
    ensure_congruent(params, grads)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient tensor {name}")));
    }
    let alpha = T::from_f64_lossy(cfg.learning_rate);
    // validate before mutating so a failed step leaves params intact
    for ((name, p), (_, g)) in params.tensors().iter().zip(grads.tensors()) {
        if p.iter().zip(g).any(|(&x, &d)| !(x - alpha * d).is_finite()) {
            return Err(Error::NonFinite(format!("update of tensor {name}")));
        }
    }
    for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (x, &d) in p.iter_mut().zip(g) {
            *x = *x - alpha * d;
        }
    }
    Ok(())
}
