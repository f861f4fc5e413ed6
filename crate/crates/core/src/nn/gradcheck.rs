//! Central finite-difference check of analytic gradients.

use super::params::{ParamId, ParameterStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Entries whose analytic and numeric gradients are both below this are
/// compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the gradient written by `eval(store, true)` with central
/// differences of `eval(store, false)` for every scalar parameter.
///
/// `eval` must be deterministic: any randomness inside it has to come from a
/// stream re-seeded on each call.
pub fn gradient_check<F>(store: &mut ParameterStore, h: f64, mut eval: F) -> GradCheckReport
where
    F: FnMut(&mut ParameterStore, bool) -> f64,
{
    store.zero_grads();
    eval(store, true);
    let analytic: Vec<(ParamId, Vec<f64>)> = store
        .ids()
        .map(|id| (id, store.grad(id).iter().copied().collect()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (id, grads) in analytic {
        for (k, &a) in grads.iter().enumerate() {
            let original = store.value(id).as_slice().expect("contiguous")[k];
            store.value_mut(id).as_slice_mut().expect("contiguous")[k] = original + h;
            let plus = eval(store, false);
            store.value_mut(id).as_slice_mut().expect("contiguous")[k] = original - h;
            let minus = eval(store, false);
            store.value_mut(id).as_slice_mut().expect("contiguous")[k] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    store.zero_grads();
    report
}
