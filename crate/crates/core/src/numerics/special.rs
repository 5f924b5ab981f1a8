//! Scalar special functions and small vector helpers used by the gate.

use crate::error::{invalid, Error, Result};

/// Guard added to the mean in [`coefficient_of_variation`].
pub const CV_EPSILON: f64 = 1e-10;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Standard normal CDF Φ(x).
pub fn normal_cdf(x: f64) -> Result<f64> {
    finite(x, "normal_cdf")?;
    Ok(phi(x))
}

pub(crate) fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
pub(crate) fn phi_density(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `ln(1 + eˣ)`, evaluated without overflow.
pub fn softplus(x: f64) -> Result<f64> {
    finite(x, "softplus")?;
    Ok(softplus_raw(x))
}

pub(crate) fn softplus_raw(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Population standard deviation over `mean + CV_EPSILON`.
///
/// Entries must be finite and non-negative; an all-zero vector gives 0.
pub fn coefficient_of_variation(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(invalid("coefficient_of_variation of an empty vector"));
    }
    for &x in v {
        finite(x, "coefficient_of_variation")?;
        if x < 0.0 {
            return Err(invalid(format!("coefficient_of_variation entry {x} is negative")));
        }
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(var.sqrt() / (mean + CV_EPSILON))
}

/// Softmax restricted to `selected`; all other positions get exactly 0.
pub fn masked_softmax(scores: &[f64], selected: &[usize]) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(invalid("masked_softmax needs at least one selected index"));
    }
    if let Some(&bad) = selected.iter().find(|&&i| i >= scores.len()) {
        return Err(invalid(format!(
            "selected index {bad} out of range for {} scores",
            scores.len()
        )));
    }
    let mut mask = vec![false; scores.len()];
    for &i in selected {
        mask[i] = true;
    }
    Ok(masked_softmax_row(scores, &mask))
}

pub(crate) fn masked_softmax_row(scores: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for w in &mut out {
        *w /= total;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Composite Simpson integration of the standard normal density on
    /// [0, x] with step `h`, independent of the erfc route.
    fn cdf_by_quadrature(x: f64, h: f64) -> f64 {
        let steps = ((x.abs() / h).round() as usize).max(2) & !1;
        let dx = x / steps as f64;
        let f = |t: f64| FRAC_1_SQRT_2PI * (-0.5 * t * t).exp();
        let mut acc = f(0.0) + f(x);
        for i in 1..steps {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(i as f64 * dx);
        }
        0.5 + acc * dx / 3.0
    }

    #[test]
    fn normal_cdf_values() {
        assert_eq!(normal_cdf(0.0).unwrap(), 0.5);
        let oracle = cdf_by_quadrature(1.0, 1e-6);
        assert!((oracle - 0.841_344_746).abs() < 1e-9);
        assert!((normal_cdf(1.0).unwrap() - oracle).abs() < 1e-9);
        let lhs = normal_cdf(-2.0).unwrap();
        assert!((lhs - (1.0 - normal_cdf(2.0).unwrap())).abs() < 1e-12);
        assert!((normal_cdf(3.0).unwrap() - cdf_by_quadrature(3.0, 1e-5)).abs() < 1e-9);
        assert!(normal_cdf(f64::NAN).is_err());
        assert!(normal_cdf(f64::INFINITY).is_err());
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(50.0).unwrap() - 50.0).abs() < 1e-12);
        // ln(1 + e^-20) = e^-20 - e^-40/2 + ...
        let expected = (-20.0f64).exp() - (-40.0f64).exp() / 2.0;
        assert!((softplus(-20.0).unwrap() - expected).abs() < 1e-22);
        assert!((softplus(-20.0).unwrap() - 2.061e-9).abs() < 1e-12);
        assert!(softplus(800.0).unwrap().is_finite());
        assert!(softplus(f64::NAN).is_err());
    }

    #[test]
    fn cv_cases() {
        assert_eq!(coefficient_of_variation(&[2.5, 2.5, 2.5]).unwrap(), 0.0);
        assert!((coefficient_of_variation(&[1.0, 3.0]).unwrap() - 0.5).abs() < 1e-9);
        assert_eq!(coefficient_of_variation(&[0.0, 0.0]).unwrap(), 0.0);
        assert!(coefficient_of_variation(&[]).is_err());
        assert!(coefficient_of_variation(&[-1.0, 1.0]).is_err());
    }

    #[test]
    fn masked_softmax_cases() {
        let w = masked_softmax(&[3.0, 1.0, 2.0], &[0, 2]).unwrap();
        let e3 = 3.0f64.exp();
        let e2 = 2.0f64.exp();
        assert!((w[0] - e3 / (e3 + e2)).abs() < 1e-15);
        assert!((w[0] - 0.73106).abs() < 1e-5);
        assert_eq!(w[1], 0.0);
        assert!((w[2] - 0.26894).abs() < 1e-5);
        assert_eq!(masked_softmax(&[5.0], &[0]).unwrap(), vec![1.0]);
        assert_eq!(masked_softmax(&[2.0, 2.0], &[0, 1]).unwrap(), vec![0.5, 0.5]);
        assert!(masked_softmax(&[1.0], &[]).is_err());
        assert!(masked_softmax(&[1.0], &[3]).is_err());
    }

    proptest! {
        #[test]
        fn normal_cdf_is_monotone(a in -40.0f64..40.0, b in -40.0f64..40.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(normal_cdf(lo).unwrap() <= normal_cdf(hi).unwrap());
        }

        #[test]
        fn normal_cdf_reflection(x in -10.0f64..10.0) {
            let s = normal_cdf(x).unwrap() + normal_cdf(-x).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn masked_softmax_shift_invariant(
            scores in proptest::collection::vec(-10.0f64..10.0, 1..8),
            shift in -100.0f64..100.0,
            pick in proptest::collection::vec(any::<bool>(), 8),
        ) {
            let mut selected: Vec<usize> = (0..scores.len()).filter(|&i| pick[i]).collect();
            if selected.is_empty() {
                selected.push(0);
            }
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let a = masked_softmax(&scores, &selected).unwrap();
            let b = masked_softmax(&shifted, &selected).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            let total: f64 = a.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for i in 0..scores.len() {
                if !selected.contains(&i) {
                    prop_assert_eq!(a[i], 0.0);
                } else {
                    prop_assert!(a[i] > 0.0);
                }
            }
        }
    }
}
