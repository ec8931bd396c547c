//! Central finite-difference checking of analytic gradients.

use thiserror::Error;

use crate::matrix::Matrix;
use crate::params::ParamStore;

pub const DEFAULT_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GradCheckError {
    #[error("loss is not finite at the base point ({0})")]
    NonFiniteBase(f64),
    #[error("loss is not finite after perturbing {param}[{offset}]")]
    NonFinitePerturbed { param: String, offset: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("analytic gradient for {0} has the wrong shape")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `loss_and_grad`'s analytic gradient against central differences
/// for every scalar parameter and returns the worst relative error
/// `|a − f| / max(|a|, |f|, 1e-8)`.
///
/// `loss_and_grad` returns the loss plus one gradient matrix per parameter in
/// store order. It is called once at the base point, then once per perturbation
/// with gradients ignored.
pub fn gradient_check<F>(
    params: &ParamStore,
    step: f64,
    mut loss_and_grad: F,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&ParamStore) -> (f64, Vec<Matrix<f64>>),
{
    if !(step > 0.0) {
        return Err(GradCheckError::BadStep(step));
    }
    let (base, analytic) = loss_and_grad(params);
    if !base.is_finite() {
        return Err(GradCheckError::NonFiniteBase(base));
    }
    for (e, g) in params.entries().iter().zip(&analytic) {
        if e.value.shape() != g.shape() {
            return Err(GradCheckError::ShapeMismatch(e.name.clone()));
        }
    }
    if analytic.len() != params.len() {
        return Err(GradCheckError::ShapeMismatch("<parameter count>".into()));
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_offset: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for flat in 0..params.flat_len() {
        let (id, offset) = params.locate(flat).expect("flat index in range");
        let original = params.flat_get(flat);
        work.flat_set(flat, original + step);
        let (plus, _) = loss_and_grad(&work);
        work.flat_set(flat, original - step);
        let (minus, _) = loss_and_grad(&work);
        work.flat_set(flat, original);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(GradCheckError::NonFinitePerturbed {
                param: params.entry(id).name.clone(),
                offset,
            });
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[id.0].data()[offset];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = params.entry(id).name.clone();
            report.worst_offset = offset;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}
