//! Closed-form exponents of the insulated two-inclusion problem.
//!
//! Everything here is a pure function of the ambient dimension `n` (and, for
//! the modal exponents, of the spherical-harmonic degree `k`). The exponents
//! are roots of quadratics of the form `c^2 + (n-1)c - mu = 0`; they are
//! evaluated in the rationalized form `2 mu / ((n-1) + sqrt((n-1)^2 + 4 mu))`
//! which avoids the cancellation of the textbook `(-b + sqrt(disc)) / 2`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Ambient dimension, `n >= 3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Dimension(u32);

impl Dimension {
    pub fn new(n: u32) -> Result<Self> {
        if n < 3 {
            return domain(format!("dimension must be at least 3, got {n}"));
        }
        Ok(Self(n))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0)
    }

    /// Eigenvalue `k (k + n - 3)` of `-Laplace` on the `(n-2)`-sphere.
    pub fn sphere_eigenvalue(self, k: u32) -> f64 {
        let k = f64::from(k);
        k * (k + self.as_f64() - 3.0)
    }
}

impl std::fmt::Display for Dimension {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Positive root of `c^2 + b c - mu = 0` for `b > 0`, `mu >= 0`.
fn positive_root(b: f64, mu: f64) -> f64 {
    if mu == 0.0 {
        return 0.0;
    }
    2.0 * mu / (b + (b * b + 4.0 * mu).sqrt())
}

/// Gradient-rate exponent `alpha(n)`, the positive root of
/// `a^2 + (n-1) a - (n-2) = 0`.
pub fn alpha(n: Dimension) -> f64 {
    let nf = n.as_f64();
    positive_root(nf - 1.0, nf - 2.0)
}

/// Decay exponent of the degree-`k` mode, positive root of
/// `c^2 + (n-1) c - k(k+n-3) = 0`.
pub fn alpha_k(n: Dimension, k: i64) -> Result<f64> {
    if k < 0 {
        return domain(format!("mode index must be non-negative, got {k}"));
    }
    let k = u32::try_from(k).map_err(|_| crate::Error::Domain(format!("mode index {k} too large")))?;
    Ok(positive_root(n.as_f64() - 1.0, n.sphere_eigenvalue(k)))
}

/// Smallest `beta` for which `r^beta (eps + r^2)^((alpha - beta)/2)` is a
/// subsolution of the radial operator, i.e. the root of `p'(1) = 0`.
///
/// `p'(1) = 2 alpha^2 + (n-1) alpha - beta (n - 3 + 2 alpha)`, so the
/// threshold is `(2 alpha^2 + (n-1) alpha) / (n - 3 + 2 alpha)`.
pub fn beta_star(n: Dimension) -> f64 {
    let a = alpha(n);
    let nf = n.as_f64();
    (2.0 * a * a + a * (nf - 1.0)) / (nf - 3.0 + 2.0 * a)
}

/// The larger exponent `(2 alpha^2 + (n-1) alpha) / (n - 3 + alpha)`.
///
/// It lies above [`beta_star`] for every `n`, so it also satisfies the
/// subsolution condition; experiments certify both.
pub fn beta_sufficient(n: Dimension) -> f64 {
    let a = alpha(n);
    let nf = n.as_f64();
    (2.0 * a * a + a * (nf - 1.0)) / (nf - 3.0 + a)
}

/// `p(x) = c2 x^2 + c1 x + c0`, the bracket of `L[r^b (eps+r^2)^((a-b)/2)]`
/// written in the variable `x = r^2 / (eps + r^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsolutionPolynomial {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl SubsolutionPolynomial {
    pub fn eval(&self, x: f64) -> f64 {
        (self.c2 * x + self.c1) * x + self.c0
    }

    pub fn derivative(&self, x: f64) -> f64 {
        2.0 * self.c2 * x + self.c1
    }
}

pub fn subsolution_polynomial(n: Dimension, beta: f64) -> SubsolutionPolynomial {
    let a = alpha(n);
    let nf = n.as_f64();
    SubsolutionPolynomial {
        c2: (beta - a) * (beta - a),
        c1: (2.0 * beta + nf - 1.0) * (a - beta) + 2.0 * beta,
        c0: (nf - 2.0 + beta) * (beta - 1.0),
    }
}

/// Absolute slack on `p'(1) <= 0`; absorbs rounding at `beta == beta_star`.
const SUBSOLUTION_SLACK: f64 = 1e-12;

/// `p'(1) <= 0`, which together with `p(1) = 0` and `c2 >= 0` makes `p >= 0`
/// on `[0, 1]`.
pub fn subsolution_condition(n: Dimension, beta: f64) -> bool {
    subsolution_polynomial(n, beta).derivative(1.0) <= SUBSOLUTION_SLACK
}

/// `min(alpha, 1 + gamma - 2s)` with the resonant case flagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TildeAlpha {
    pub value: f64,
    /// `1 + gamma - 2s` coincides with `alpha` (to 1e-12).
    pub resonant: bool,
}

pub fn tilde_alpha(n: Dimension, gamma: f64, s: f64) -> Result<TildeAlpha> {
    if !(s >= 0.0) {
        return domain(format!("s must be non-negative, got {s}"));
    }
    let forcing = 1.0 + gamma - 2.0 * s;
    if !(forcing > 0.0) {
        return domain(format!("1 + gamma - 2s must be positive, got {forcing}"));
    }
    let a = alpha(n);
    Ok(TildeAlpha {
        value: a.min(forcing),
        resonant: (forcing - a).abs() <= 1e-12,
    })
}

/// Every exponent for one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSet {
    pub n: Dimension,
    pub alpha: f64,
    /// `alpha_k[k]` for `k = 0..=k_max`.
    pub alpha_k: Vec<f64>,
    pub beta_star: f64,
    pub beta_sufficient: f64,
}

impl RateSet {
    pub fn new(n: Dimension, k_max: u32) -> Self {
        let alpha_k = (0..=i64::from(k_max))
            .map(|k| alpha_k(n, k).expect("k is non-negative"))
            .collect();
        Self {
            n,
            alpha: alpha(n),
            alpha_k,
            beta_star: beta_star(n),
            beta_sufficient: beta_sufficient(n),
        }
    }

    /// Predicted exponent of `sup |grad u|` in `eps`.
    pub fn gradient_rate(&self) -> f64 {
        0.5 * (self.alpha - 1.0)
    }

    /// Predicted exponent of the potential at `r = sqrt(eps)` in `eps`.
    pub fn potential_rate(&self) -> f64 {
        0.5 * self.alpha
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dim(n: u32) -> Dimension {
        Dimension::new(n).unwrap()
    }

    /// Newton refinement of the quadratic root carried in double-double
    /// arithmetic; independent of the rationalized formula above.
    fn alpha_newton_dd(n: u32, mu: f64) -> f64 {
        let b = f64::from(n) - 1.0;
        let mut x = 0.5 * (-b + (b * b + 4.0 * mu).sqrt());
        for _ in 0..4 {
            // f = x^2 + b x - mu, f' = 2x + b, with the residual in two-sum form.
            let (sq_hi, sq_lo) = two_prod(x, x);
            let (bx_hi, bx_lo) = two_prod(b, x);
            let (s_hi, s_lo) = two_sum(sq_hi, bx_hi);
            let f = (s_hi - mu) + (s_lo + sq_lo + bx_lo);
            x -= f / (2.0 * x + b);
        }
        x
    }

    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    fn two_prod(a: f64, b: f64) -> (f64, f64) {
        let p = a * b;
        (p, a.mul_add(b, -p))
    }

    #[test]
    fn rejects_low_dimension() {
        assert!(Dimension::new(2).is_err());
        assert!(Dimension::new(3).is_ok());
    }

    #[test]
    fn alpha_three_dimensions() {
        let a = alpha(dim(3));
        assert!((a - (2f64.sqrt() - 1.0)).abs() < 1e-15);
        assert!((0.5 * (a - 1.0) - 0.5 * (2f64.sqrt() - 2.0)).abs() < 1e-15);
        assert!((a - 0.414_213_562_4).abs() < 1e-10);
    }

    #[test]
    fn alpha_four_dimensions() {
        let a = alpha(dim(4));
        assert!((a - 0.5 * (-3.0 + 17f64.sqrt())).abs() < 1e-15);
        assert!((a - 0.561_552_812_8).abs() < 1e-10);
    }

    #[test]
    fn alpha_matches_extended_precision() {
        for n in 3..=40 {
            let reference = alpha_newton_dd(n, f64::from(n) - 2.0);
            assert!((alpha(dim(n)) - reference).abs() <= 2.0 * f64::EPSILON, "n = {n}");
        }
    }

    #[test]
    fn alpha_large_n_asymptotics() {
        for n in [50u32, 100, 400, 1000] {
            let nf = f64::from(n);
            let gap = (alpha(dim(n)) - (1.0 - 2.0 / nf)).abs();
            assert!(gap * nf * nf < 10.0, "n = {n}, gap = {gap}");
        }
    }

    #[test]
    fn alpha_k_special_values() {
        for n in 3..=12 {
            assert_eq!(alpha_k(dim(n), 0).unwrap(), 0.0);
            assert!((alpha_k(dim(n), 1).unwrap() - alpha(dim(n))).abs() < 1e-15);
        }
        let a2 = alpha_k(dim(3), 2).unwrap();
        assert!((a2 - (5f64.sqrt() - 1.0)).abs() < 1e-14);
        assert!((a2 - 1.236_067_977_5).abs() < 1e-10);
        assert!(alpha_k(dim(3), -1).is_err());
    }

    #[test]
    fn beta_star_three_dimensions() {
        // The exact threshold collapses to alpha + 1 = sqrt(2) at n = 3, and
        // the larger exponent to 2 alpha + 2 = 2 sqrt(2).
        assert!((beta_star(dim(3)) - 2f64.sqrt()).abs() < 1e-14);
        assert!((beta_sufficient(dim(3)) - 2.0 * 2f64.sqrt()).abs() < 1e-14);
        assert!((beta_sufficient(dim(3)) - 2.828_427_124_7).abs() < 1e-10);
    }

    #[test]
    fn beta_star_identity_form() {
        // alpha^2 = (n-2) - (n-1) alpha turns the numerator into 2(n-2) - (n-1) alpha.
        for n in 3..=20 {
            let a = alpha(dim(n));
            let nf = f64::from(n);
            let alt = (2.0 * (nf - 2.0) - (nf - 1.0) * a) / (nf - 3.0 + 2.0 * a);
            assert!((beta_star(dim(n)) - alt).abs() < 1e-13, "n = {n}");
            let alt_sufficient = (2.0 * (nf - 2.0) - (nf - 1.0) * a) / (nf - 3.0 + a);
            assert!((beta_sufficient(dim(n)) - alt_sufficient).abs() < 1e-13);
        }
    }

    #[test]
    fn beta_star_above_alpha() {
        for n in 3..=20 {
            let d = dim(n);
            assert!(beta_star(d) > alpha(d));
            assert!(beta_sufficient(d) >= beta_star(d));
        }
    }

    #[test]
    fn polynomial_vanishes_at_one() {
        for n in 3..=10 {
            for i in 0..=60 {
                let beta = 0.1 * f64::from(i);
                let p = subsolution_polynomial(dim(n), beta);
                assert!(p.eval(1.0).abs() < 1e-12, "n = {n}, beta = {beta}");
            }
        }
    }

    #[test]
    fn polynomial_is_linear_at_beta_alpha() {
        let d = dim(5);
        let p = subsolution_polynomial(d, alpha(d));
        assert_eq!(p.c2, 0.0);
    }

    #[test]
    fn condition_boundary_cases() {
        let d = dim(3);
        let bs = beta_star(d);
        assert!(subsolution_polynomial(d, bs).derivative(1.0).abs() < 1e-10);
        assert!(subsolution_condition(d, bs));
        assert!(subsolution_condition(d, bs + 0.1));
        assert!(!subsolution_condition(d, bs - 0.1));
        // the larger exponent is strictly inside the admissible range
        assert!(subsolution_condition(d, 2.0 * 2f64.sqrt() + 0.1));
        assert!(subsolution_condition(d, 2.0 * 2f64.sqrt() - 0.1));
        assert!(subsolution_polynomial(d, 2.0 * 2f64.sqrt()).derivative(1.0) < -1.0);
    }

    #[test]
    fn tilde_alpha_cases() {
        let a3 = alpha(dim(3));
        assert_eq!(tilde_alpha(dim(3), 0.9, 0.0).unwrap().value, a3);
        let t = tilde_alpha(dim(3), 0.1, 0.5).unwrap();
        assert!((t.value - 0.1).abs() < 1e-15);
        assert!(!t.resonant);
        let a5 = tilde_alpha(dim(5), 0.5, 0.0).unwrap().value;
        assert!((a5 - (7f64.sqrt() - 2.0)).abs() < 1e-14);
        assert!(tilde_alpha(dim(3), 0.1, 0.6).is_err());
        assert!(tilde_alpha(dim(3), 0.1, -0.1).is_err());
        let resonant = tilde_alpha(dim(3), a3 - 1.0, 0.0).unwrap();
        assert!(resonant.resonant);
    }

    #[test]
    fn rate_set_table() {
        let set = RateSet::new(dim(4), 6);
        assert_eq!(set.alpha_k.len(), 7);
        assert!((set.gradient_rate() + 0.219_223_593_6).abs() < 1e-9);
    }
}
