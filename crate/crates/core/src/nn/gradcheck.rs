//! Central finite-difference check of analytic parameter gradients.

use crate::error::{Error, Result};
use crate::nn::HasParams;

/// What the objective closure is asked to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Evaluate the scalar objective only.
    LossOnly,
    /// Evaluate and backpropagate, accumulating into the parameter gradients.
    WithGradients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_layer: String,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    /// Number of parameter elements compared.
    pub checked: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares every analytic gradient element against
/// `(f(theta + eps) - f(theta - eps)) / (2 eps)` and returns the worst
/// relative error.
///
/// `objective` must compute the same scalar in both modes; in
/// [`Mode::WithGradients`] it also backpropagates into the model's
/// parameter gradients. Gradients are zeroed before the analytic pass.
pub fn grad_check<M, F>(model: &mut M, eps: f64, mut objective: F) -> Result<GradCheckReport>
where
    M: HasParams<f64>,
    F: FnMut(&mut M, Mode) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    model.param_store_mut().zero_grad();
    let base = objective(model, Mode::WithGradients)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let analytic: Vec<Vec<Vec<f64>>> = model
        .param_store()
        .layers()
        .iter()
        .map(|l| l.params().iter().map(|p| p.grad.data().to_vec()).collect())
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_layer: String::new(),
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    for (li, layer_grads) in analytic.iter().enumerate() {
        for (pi, grads) in layer_grads.iter().enumerate() {
            for (e, &a) in grads.iter().enumerate() {
                let orig = param_value(model, li, pi, e);
                set_param(model, li, pi, e, orig + eps);
                let plus = objective(model, Mode::LossOnly)?;
                set_param(model, li, pi, e, orig - eps);
                let minus = objective(model, Mode::LossOnly)?;
                set_param(model, li, pi, e, orig);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite("grad_check objective".into()));
                }
                let numeric = (plus - minus) / (2.0 * eps);
                let err = relative_error(a, numeric);
                report.checked += 1;
                if err > report.max_rel_error || report.worst_layer.is_empty() {
                    let layer = &model.param_store().layers()[li];
                    report.max_rel_error = err;
                    report.worst_layer = format!("{}.{}", layer.name, if pi == 0 { "weight" } else { "bias" });
                    report.worst_index = e;
                    report.analytic_at_worst = a;
                    report.numeric_at_worst = numeric;
                }
            }
        }
    }
    Ok(report)
}

fn param_value<M: HasParams<f64>>(model: &M, layer: usize, param: usize, e: usize) -> f64 {
    model.param_store().layers()[layer].params()[param].value.data()[e]
}

fn set_param<M: HasParams<f64>>(model: &mut M, layer: usize, param: usize, e: usize, v: f64) {
    let l = &mut model.param_store_mut().layers_mut()[layer];
    let [w, b] = l.params_mut();
    let p = if param == 0 { w } else { b };
    p.value.data_mut()[e] = v;
}
