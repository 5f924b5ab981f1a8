//! Central finite-difference gradient checking.

use super::{Matrix, ParamStore};

/// Floor on the relative-error denominator.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// Outcome of a [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub numeric: Vec<Matrix>,
}

/// `(f(p + h) - f(p - h)) / 2h` for every entry of every parameter.
pub fn numeric_gradient<F>(mut loss_fn: F, params: &ParamStore, h: f64) -> Vec<Matrix>
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = params.values()[p].clone();
        for e in 0..grad.len() {
            let original = work.values()[p].data()[e];
            work.values_mut()[p].data_mut()[e] = original + h;
            let plus = loss_fn(&work);
            work.values_mut()[p].data_mut()[e] = original - h;
            let minus = loss_fn(&work);
            work.values_mut()[p].data_mut()[e] = original;
            grad.data_mut()[e] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Largest entry-wise relative error between two gradient lists.
pub fn max_relative_error(analytic: &[Matrix], numeric: &[Matrix]) -> f64 {
    worst_entry(analytic, numeric).0
}

fn worst_entry(analytic: &[Matrix], numeric: &[Matrix]) -> (f64, Option<(usize, usize)>) {
    assert_eq!(analytic.len(), numeric.len(), "gradient list lengths differ");
    let mut worst = (0.0, None);
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.shape(), n.shape(), "gradient shapes differ for parameter {p}");
        for (e, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let err = relative_error(x, y);
            if err > worst.0 || worst.1.is_none() {
                worst = (err, Some((p, e)));
            }
        }
    }
    worst
}

/// Compares `analytic` against central differences of `loss_fn` at `params`.
///
/// `loss_fn` must be deterministic; stochastic parts (gate noise) have to be
/// replayed identically on every call.
pub fn finite_difference_check<F>(loss_fn: F, params: &ParamStore, analytic: &[Matrix], h: f64) -> GradCheck
where
    F: FnMut(&ParamStore) -> f64,
{
    let numeric = numeric_gradient(loss_fn, params, h);
    let (max_relative_error, worst) = worst_entry(analytic, &numeric);
    GradCheck {
        max_relative_error,
        worst,
        numeric,
    }
}
