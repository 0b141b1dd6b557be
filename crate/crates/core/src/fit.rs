//! Log-log least squares.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Ordinary least-squares line through `(ln x, ln y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub log_x: Vec<f64>,
    pub log_y: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    /// Largest absolute residual in `ln y`.
    pub max_residual: f64,
    /// Inclusive `x` range that was fitted.
    pub window: (f64, f64),
}

impl RateFit {
    pub fn predict(&self, x: f64) -> f64 {
        (self.intercept + self.slope * x.ln()).exp()
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.log_x
            .iter()
            .zip(&self.log_y)
            .map(|(lx, ly)| ly - (self.intercept + self.slope * lx))
            .collect()
    }
}

/// Fits `y ~ C x^p` over the samples whose `x` lies in `window`
/// (all samples when `None`).
pub fn fit_rate(x: &[f64], y: &[f64], window: Option<(f64, f64)>) -> Result<RateFit> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    let (lo, hi) = window.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let mut log_x = Vec::new();
    let mut log_y = Vec::new();
    for (&xi, &yi) in x.iter().zip(y) {
        if xi < lo || xi > hi {
            continue;
        }
        if !(xi > 0.0) || !(yi > 0.0) {
            return domain(format!("log-log fit needs positive samples, got ({xi}, {yi})"));
        }
        log_x.push(xi.ln());
        log_y.push(yi.ln());
    }
    if log_x.len() < 4 {
        return Err(Error::IllConditioned(format!("{} samples in window, need at least 4", log_x.len())));
    }
    let m = log_x.len() as f64;
    let mx = log_x.iter().sum::<f64>() / m;
    let my = log_y.iter().sum::<f64>() / m;
    let sxx: f64 = log_x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if !(sxx > 0.0) {
        return Err(Error::IllConditioned("all abscissae coincide".into()));
    }
    let sxy: f64 = log_x.iter().zip(&log_y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let max_residual = log_x
        .iter()
        .zip(&log_y)
        .map(|(a, b)| (b - intercept - slope * a).abs())
        .fold(0.0, f64::max);
    let used_lo = log_x.iter().cloned().fold(f64::INFINITY, f64::min).exp();
    let used_hi = log_x.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp();
    Ok(RateFit { log_x, log_y, slope, intercept, max_residual, window: (used_lo, used_hi) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(lo: f64, hi: f64, count: usize) -> Vec<f64> {
        (0..count)
            .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (count - 1) as f64).exp())
            .collect()
    }

    #[test]
    fn exact_square_root() {
        let x = geom(1e-4, 1.0, 9);
        let y: Vec<f64> = x.iter().map(|v| v.sqrt()).collect();
        let f = fit_rate(&x, &y, None).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-13);
        assert!(f.max_residual < 1e-13);
    }

    #[test]
    fn exact_power_six_decades() {
        let x = geom(1e-6, 1.0, 13);
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v.powf(-0.2929)).collect();
        let f = fit_rate(&x, &y, None).unwrap();
        assert!((f.slope + 0.2929).abs() < 1e-12);
        assert!((f.predict(0.01) - 3.0 * 0.01f64.powf(-0.2929)).abs() < 1e-9);
    }

    #[test]
    fn perturbed_power() {
        let x = geom(1e-5, 1e-2, 10);
        let y: Vec<f64> = x.iter().map(|v| v.sqrt() * (1.0 + 0.1 * v)).collect();
        let f = fit_rate(&x, &y, None).unwrap();
        assert!((f.slope - 0.5).abs() < 0.01);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_rate(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], None).is_err());
        assert!(fit_rate(&[1.0, 2.0, 3.0, 4.0], &[1.0, -2.0, 3.0, 4.0], None).is_err());
        assert!(fit_rate(&[1.0, 1.0, 1.0, 1.0], &[1.0, 2.0, 3.0, 4.0], None).is_err());
        let x = geom(1e-3, 1.0, 10);
        assert!(fit_rate(&x, &x, Some((0.5, 1.0))).is_err());
        assert_eq!(fit_rate(&x, &x, Some((1e-3, 0.1))).unwrap().log_x.len(), 7);
    }
}
