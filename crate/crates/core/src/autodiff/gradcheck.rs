use serde::Serialize;

use super::{Tensor, TensorError};

/// Worst-case disagreement for one input of a gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct InputCheck {
    pub index: usize,
    pub max_abs_err: f64,
    /// `max |analytic - numeric| / max(‖analytic‖∞, ‖numeric‖∞, 1)`.
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    pub eps: f64,
    pub tol: f64,
    pub inputs: Vec<InputCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`, element by element.
pub fn grad_check<F>(
    label: &str,
    f: F,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&[Tensor]) -> Result<Tensor, TensorError>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().requires_grad(true)).collect();
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check `{label}` needs a scalar-valued function, got shape {:?}",
            out.shape()
        )));
    }
    out.backward()?;

    let base: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    let mut checks = Vec::with_capacity(inputs.len());
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut numeric = Vec::with_capacity(leaf.numel());
        for j in 0..leaf.numel() {
            let probe = |delta: f64| -> Result<f64, TensorError> {
                let mut data = base[i].to_vec();
                data[j] += delta;
                let mut args = base.clone();
                args[i] = Tensor::new(data, base[i].shape())?;
                Ok(f(&args)?.item())
            };
            let hi = probe(eps)?;
            let lo = probe(-eps)?;
            numeric.push((hi - lo) / (2.0 * eps));
        }
        let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let scale = inf(&analytic).max(inf(&numeric)).max(1.0);
        let max_abs_err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        checks.push(InputCheck { index: i, max_abs_err, max_rel_err: max_abs_err / scale });
    }
    let passed = checks.iter().all(|c| c.max_rel_err < tol && c.max_rel_err.is_finite());
    Ok(GradCheckReport { label: label.to_string(), eps, tol, inputs: checks, passed })
}
