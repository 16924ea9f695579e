//! Power-law regression in log-log space.

use crate::{Error, Result};

/// `value ≈ prefactor · (N − shift)^exponent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    pub prefactor: f64,
    pub exponent: f64,
    pub shift: i64,
    /// RMS of `ln(value) − ln(model)` over the fitted points.
    pub rms_log_residual: f64,
}

impl PowerLawFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.prefactor * (n - self.shift as f64).powf(self.exponent)
    }
}

/// Ordinary least squares of `ln v` against `ln(N − shift)`.
pub fn fit_power_law(points: &[(f64, f64)], shift: i64) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::InsufficientPoints(points.len()));
    }
    let mut xs = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    for (index, &(n, v)) in points.iter().enumerate() {
        let base = n - shift as f64;
        if !(base > 0.0) {
            return Err(Error::InvalidPoint {
                index,
                reason: format!("N = {n} does not exceed the shift {shift}"),
            });
        }
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidPoint {
                index,
                reason: format!("value {v} is not positive"),
            });
        }
        xs.push(base.ln());
        ys.push(v.ln());
    }
    let count = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / count;
    let my = ys.iter().sum::<f64>() / count;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidPoint {
            index: 0,
            reason: "all abscissae coincide".into(),
        });
    }
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - exponent * x).powi(2))
        .sum();
    Ok(PowerLawFit {
        prefactor: intercept.exp(),
        exponent,
        shift,
        rms_log_residual: (rss / count).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_inverse_square_root() {
        let pts: Vec<(f64, f64)> = [4.0, 9.0, 16.0, 25.0]
            .iter()
            .map(|&n: &f64| (n, 2.0 * n.powf(-0.5)))
            .collect();
        let fit = fit_power_law(&pts, 0).unwrap();
        assert!((fit.prefactor - 2.0).abs() < 1e-12);
        assert!((fit.exponent + 0.5).abs() < 1e-12);
        assert!(fit.rms_log_residual < 1e-12);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            fit_power_law(&[(1.0, 1.0), (2.0, 2.0)], 0),
            Err(Error::InsufficientPoints(2))
        ));
    }

    #[test]
    fn shift_domain_is_checked() {
        let pts = [(2.0, 1.0), (3.0, 1.0), (4.0, 1.0)];
        assert!(matches!(
            fit_power_law(&pts, 2),
            Err(Error::InvalidPoint { index: 0, .. })
        ));
        let pts = [(3.0, 1.0), (4.0, -1.0), (5.0, 1.0)];
        assert!(matches!(
            fit_power_law(&pts, 2),
            Err(Error::InvalidPoint { index: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn recovers_exact_power_laws(a in 0.01f64..100.0, b in -2.0f64..2.0, shift in 0i64..5) {
            let pts: Vec<(f64, f64)> = [7.0, 19.0, 37.0, 61.0, 91.0, 127.0]
                .iter()
                .map(|&n: &f64| (n, a * (n - shift as f64).powf(b)))
                .collect();
            let fit = fit_power_law(&pts, shift).unwrap();
            prop_assert!(((fit.prefactor - a) / a).abs() < 1e-10);
            prop_assert!((fit.exponent - b).abs() < 1e-10 * b.abs().max(1.0));
        }
    }
}
