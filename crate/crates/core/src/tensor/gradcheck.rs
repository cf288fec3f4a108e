//! Central-difference gradient oracle.

use std::fmt;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Magnitude below which an entry's error is measured against this floor
/// instead of the gradient itself.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub step: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_abs_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_abs_error).fold(0.0, f64::max)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.tensors.iter().map(|t| t.name.len()).max().unwrap_or(4).max(9);
        writeln!(
            f,
            "{:<width$}  {:>8}  {:>12}  {:>12}  {:>12}  status",
            "parameter", "entries", "grad_norm", "max_abs", "max_rel"
        )?;
        for t in &self.tensors {
            let status = if t.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<width$}  {:>8}  {:>12.4e}  {:>12.4e}  {:>12.4e}  {status}",
                t.name, t.entries, t.grad_norm, t.max_abs_error, t.max_rel_error
            )?;
        }
        write!(
            f,
            "step {:e}, tolerance {:e}: max abs {:.4e}, max rel {:.4e} -> {}",
            self.step,
            self.tolerance,
            self.max_abs_error(),
            self.max_rel_error(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Autograd gradients of the scalar `f` with respect to each tensor in `params`.
pub fn autograd<F>(f: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let value = g.value(loss).item();
    Ok((value, vars.iter().map(|&v| g.grad(v)).collect()))
}

/// Compares autograd against `(f(θ+h) − f(θ−h)) / 2h` for every entry of every
/// tensor in `params`. The tensors are perturbed in place and restored.
pub fn finite_diff_check<F>(
    f: F,
    names: &[String],
    params: &mut [Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(names.len(), params.len());
    let (_, grads) = autograd(&f, params)?;
    let mut tensors = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut check = TensorCheck {
            name: names[p].clone(),
            entries: params[p].len(),
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            grad_norm: grads[p].norm(),
        };
        for i in 0..params[p].len() {
            let original = params[p].data()[i];
            params[p].data_mut()[i] = original + step;
            let plus = evaluate(&f, params)?;
            params[p].data_mut()[i] = original - step;
            let minus = evaluate(&f, params)?;
            params[p].data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads[p].data()[i];
            check.max_abs_error = check.max_abs_error.max((analytic - numeric).abs());
            check.max_rel_error = check.max_rel_error.max(relative_error(analytic, numeric));
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        tensors,
        step,
        tolerance,
    })
}
