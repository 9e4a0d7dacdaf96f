//! Central finite-difference verification of analytic gradients.

use super::param::Module;
use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    /// Added to the denominator of the relative error. Coordinates whose true
    /// derivative is zero show pure rounding noise in the central difference;
    /// the floor keeps that noise from reading as a large relative error.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-7 }
    }
}

/// Compares the analytic gradient of `loss` against central differences over
/// every coordinate of every parameter that requires a gradient.
///
/// `loss(model, backward)` must return the scalar loss and, when `backward`
/// is true, accumulate its gradient into the (already zeroed) parameters.
pub fn finite_diff_gradcheck<M, F>(model: &mut M, mut loss: F, cfg: GradcheckConfig) -> Result<GradcheckReport>
where
    M: Module,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    model.zero_grad();
    let base = loss(model, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("gradcheck base loss".into()));
    }

    let mut targets = Vec::new();
    model.visit_params(&mut |p| {
        if p.requires_grad() {
            let g = p.grad.clone().unwrap_or_else(|| super::Tensor::zeros(p.shape()));
            targets.push((p.name().to_string(), g));
        }
    });

    let mut report = GradcheckReport { max_rel_error: 0.0, worst: None, coordinates: 0 };
    for (name, analytic) in &targets {
        for i in 0..analytic.len() {
            let plus = eval_perturbed(model, &mut loss, name, i, cfg.step)?;
            let minus = eval_perturbed(model, &mut loss, name, i, -cfg.step)?;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12 + cfg.floor);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

fn eval_perturbed<M, F>(model: &mut M, loss: &mut F, name: &str, index: usize, delta: f64) -> Result<f64>
where
    M: Module,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    let mut original = 0.0;
    model.visit_params_mut(&mut |p| {
        if p.name() == name {
            let v = &mut p.value.data_mut()[index];
            original = *v;
            *v += delta;
        }
    });
    let value = loss(model, false);
    model.visit_params_mut(&mut |p| {
        if p.name() == name {
            p.value.data_mut()[index] = original;
        }
    });
    let value = value?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss with `{name}`[{index}] perturbed")));
    }
    Ok(value)
}
