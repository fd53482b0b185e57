//! Central finite-difference gradient verification, used by the numerical
//! integrity tests. Always runs in f64.

use ndarray::ArrayD;

use super::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients against central differences of `loss`.
/// `loss` must be deterministic: any sampling noise has to be frozen inside
/// the closure.
pub fn central_difference(
    store: &ParamStore<f64>,
    analytic: &[(ParamId, ArrayD<f64>)],
    loss: impl Fn(&ParamStore<f64>) -> f64,
    h: f64,
) -> GradCheckReport {
    let mut work = store.clone();
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0usize;
    for (id, grad) in analytic {
        let n = store.get(*id).len();
        debug_assert_eq!(grad.len(), n);
        for idx in 0..n {
            let original = store.get(*id).as_slice().unwrap()[idx];
            work.get_mut(*id).as_slice_mut().unwrap()[idx] = original + h;
            let plus = loss(&work);
            work.get_mut(*id).as_slice_mut().unwrap()[idx] = original - h;
            let minus = loss(&work);
            work.get_mut(*id).as_slice_mut().unwrap()[idx] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let exact = grad.as_slice().unwrap()[idx];
            let denom = exact.abs().max(numeric.abs()).max(1e-6);
            let rel = (exact - numeric).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_err,
        checked,
    }
}
