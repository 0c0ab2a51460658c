//! Loss, Adam and the step-halving learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Tensor};

/// `L = 1/(2n) * sum_i ||pred_i - target_i||^2` over a batch of `n` samples.
///
/// Returns the loss (accumulated in `f64`) and its gradient with respect to
/// `pred`, `(pred - target) / n`.
pub fn mse_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    pred.check_same_shape("mse_loss", target)?;
    let n = pred.shape().n.max(1);
    let inv_n = T::from_f64_lossy(1.0 / n as f64);
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        sum += d.as_f64() * d.as_f64();
        grad.push(d * inv_n);
    }
    Ok((sum / (2.0 * n as f64), Tensor::from_vec(pred.shape(), grad)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }
}

impl AdamState {
    pub fn with_lr(lr: f64) -> Self {
        AdamState {
            lr,
            ..Self::default()
        }
    }
}

/// One bias-corrected Adam update of every parameter, then zeroes the
/// gradients. Nothing is modified if any gradient is non-finite.
pub fn adam_step<T: Element>(params: &mut ParamStore<T>, state: &mut AdamState) -> Result<()> {
    if !(state.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", state.lr)));
    }
    for layer in params.layers() {
        for (p, what) in layer.params().iter().zip(["weight", "bias"]) {
            if !p.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}.{what}", layer.name)));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for layer in params.layers_mut() {
        for p in layer.params_mut() {
            let value = p.value.data_mut().iter_mut();
            let grad = p.grad.data().iter();
            let m = p.adam_m.data_mut().iter_mut();
            let v = p.adam_v.data_mut().iter_mut();
            for (((theta, &g), m), v) in value.zip(grad).zip(m).zip(v) {
                let g = g.as_f64();
                let mi = b1 * m.as_f64() + (1.0 - b1) * g;
                let vi = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = T::from_f64_lossy(mi);
                *v = T::from_f64_lossy(vi);
                let step = state.lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
                *theta = T::from_f64_lossy(theta.as_f64() - step);
            }
            p.zero_grad();
        }
    }
    Ok(())
}

/// `initial * 0.5^floor(step / half_every)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub half_every: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 1e-4,
            half_every: 400_000,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        let halvings = step / self.half_every.max(1);
        self.initial * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
    }
}
