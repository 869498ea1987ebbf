//! Central finite-difference verification of analytic gradients.
//!
//! The checker is the independent oracle for every backward pass in this
//! crate: it re-derives each partial derivative from two forward
//! evaluations and compares against the accumulated analytic gradient.
//! Run it in `f64` only; the differences drown in rounding noise at `f32`.

use alloc::format;
use alloc::string::String;

use crate::optim::ParamSet;
use crate::{CoreError, Result};

/// Result of one gradient check over a parameter set.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Name of the parameter group holding the worst element.
    pub worst_param: String,
    /// Flat index of the worst element within that group.
    pub worst_index: usize,
    pub groups_checked: usize,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares the analytic gradients stored in `params` against central
/// finite differences of `f`.
///
/// The caller must have populated `params.grad` (forward + backward at the
/// unperturbed point) before calling. `f` re-evaluates the same scalar loss
/// for perturbed parameter values and must be deterministic. Frozen groups
/// are skipped. The relative error denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_gradcheck<F>(
    params: &mut ParamSet<f64>,
    epsilon: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet<f64>) -> Result<f64>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(CoreError::Param(format!(
            "gradcheck epsilon must lie in [1e-6, 1e-3], got {epsilon}"
        )));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        groups_checked: 0,
        elements_checked: 0,
    };
    let group_count = params.len();
    for gi in 0..group_count {
        let (frozen, len, name) = {
            let g = params.group(crate::optim::ParamId(gi));
            (g.frozen, g.value.len(), g.name.clone())
        };
        if frozen {
            continue;
        }
        report.groups_checked += 1;
        for ei in 0..len {
            let id = crate::optim::ParamId(gi);
            let original = params.value(id).data()[ei];
            params.value_mut(id).data_mut()[ei] = original + epsilon;
            let plus = f(params)?;
            params.value_mut(id).data_mut()[ei] = original - epsilon;
            let minus = f(params)?;
            params.value_mut(id).data_mut()[ei] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(CoreError::Eval(format!(
                    "non-finite loss while perturbing {name}[{ei}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = params.grad(id).data()[ei];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.elements_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = ei;
            }
        }
    }
    Ok(report)
}
