//! Central finite-difference verification of tape gradients.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    /// `max |analytic − numeric|` normalized by the tensor's largest gradient magnitude.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Set when the loss or any gradient entry was NaN or infinite.
    pub non_finite: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| !t.non_finite && t.max_rel_error <= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| if t.non_finite { f64::INFINITY } else { t.max_rel_error })
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences `(f(x+h) − f(x−h)) / 2h`, one parameter element at a time.
///
/// `f` receives a fresh graph and one leaf per entry of `params`, in order.
pub fn grad_check<F>(
    params: &[(String, Tensor<f64>)],
    f: F,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out)
            .item()
            .ok_or_else(|| Error::NonScalarLoss(g.shape(out).to_vec()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base_finite = g.value(loss).all_finite();
    g.backward(loss)?;

    let mut current: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut tensors = Vec::with_capacity(params.len());
    for (pi, (name, _)) in params.iter().enumerate() {
        let analytic = g
            .grad(vars[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].1.shape().to_vec()));
        let mut non_finite = !base_finite || !analytic.all_finite();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let orig = current[pi].data()[j];
            current[pi].data_mut()[j] = orig + step;
            let plus = eval(&current)?;
            current[pi].data_mut()[j] = orig - step;
            let minus = eval(&current)?;
            current[pi].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                non_finite = true;
            }
            numeric.push((plus - minus) / (2.0 * step));
        }
        let scale = analytic
            .data()
            .iter()
            .chain(&numeric)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let max_abs = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let max_rel = if scale > 0.0 { max_abs / scale } else { max_abs };
        tensors.push(TensorCheck {
            name: name.clone(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            non_finite,
        });
    }
    Ok(GradCheckReport { tolerance, tensors })
}
