//! Small special-function helpers shared by the posterior integrands.

use statrs::function::gamma::ln_gamma;

/// `ln B(a, b)` via log-gamma; requires `a, b > 0`.
#[inline]
pub fn lbeta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Log density of `Beta(a, b)` at `x` in `(0, 1)`.
#[inline]
pub fn log_beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - lbeta(a, b)
}
