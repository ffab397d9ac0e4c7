//! Central finite-difference checks of analytic parameter gradients.
//!
//! The numeric side only re-evaluates the scalar objective; it never looks
//! at the tape, so it stays independent of the backward rules it checks.

use super::{ParamGrads, ParamStore};

/// Magnitude below which errors are measured absolutely rather than relatively.
pub const DEFAULT_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (parameter name, element, analytic, numeric) of the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Central difference of `f` with respect to one scalar.
pub fn central_difference(x: f64, step: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Compares `analytic` against central differences of `objective` over every
/// element of every parameter in `store`.
pub fn check_params(
    store: &ParamStore,
    analytic: &ParamGrads,
    step: f64,
    floor: f64,
    mut objective: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for id in store.ids() {
        let n = store.get(id).len();
        for e in 0..n {
            let x0 = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = x0 + step;
            let up = objective(&work);
            work.get_mut(id).data_mut()[e] = x0 - step;
            let down = objective(&work);
            work.get_mut(id).data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(id).map_or(0.0, |g| g[e]);
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.name(id).to_string(), e, a, numeric));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor_for_tiny_values() {
        assert_eq!(relative_error(1e-9, 0.0, 1e-3), 1e-6);
        assert!((relative_error(2.0, 1.0, 1e-3) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn central_difference_of_cubic() {
        let d = central_difference(2.0, 1e-5, |x| x * x * x);
        assert!((d - 12.0).abs() < 1e-8);
    }
}
