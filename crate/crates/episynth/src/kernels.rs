//! Log-domain probability kernels.
//!
//! Every likelihood in the crate is assembled from these functions, and all
//! arithmetic stays on the log scale. Boundary probabilities (0 and 1) are
//! legal arguments: an observation that is impossible under the parameter
//! returns `-inf` rather than an error, so samplers treat it as a rejection.

use crate::error::{Error, Result};
use statrs::function::gamma::ln_gamma;

/// ln C(n, k). Caller guarantees k <= n.
pub fn ln_choose(n: u64, k: u64) -> f64 {
    debug_assert!(k <= n);
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Binomial log pmf of `y` successes in `n` trials with success probability `p`.
///
/// `y > n` is a caller error; a probability outside [0, 1] is a caller error.
/// At `p = 0` or `p = 1` the pmf is degenerate and the impossible outcomes
/// get `-inf`.
pub fn binomial_logpmf(y: u64, n: u64, p: f64) -> Result<f64> {
    if y > n {
        return Err(Error::Domain(format!("binomial count {y} exceeds trials {n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("binomial probability {p} outside [0, 1]")));
    }
    if p == 0.0 {
        return Ok(if y == 0 { 0.0 } else { f64::NEG_INFINITY });
    }
    if p == 1.0 {
        return Ok(if y == n { 0.0 } else { f64::NEG_INFINITY });
    }
    Ok(ln_choose(n, y) + y as f64 * p.ln() + (n - y) as f64 * (1.0 - p).ln())
}

/// Negative binomial log pmf with mean `mean` and size (over-dispersion)
/// parameter `size`, so the variance is `mean + mean^2 / size`. The Poisson
/// limit is `size -> inf`.
pub fn negbin_logpmf(y: u64, mean: f64, size: f64) -> Result<f64> {
    if !(mean >= 0.0) {
        return Err(Error::Domain(format!("negative binomial mean {mean} must be >= 0")));
    }
    if !(size > 0.0) {
        return Err(Error::Domain(format!("negative binomial size {size} must be > 0")));
    }
    if mean == 0.0 {
        return Ok(if y == 0 { 0.0 } else { f64::NEG_INFINITY });
    }
    let yf = y as f64;
    // ln Gamma(y + r) - ln Gamma(r) - ln Gamma(y + 1)
    //   + r ln(r / (r + mu)) + y ln(mu / (r + mu))
    Ok(ln_gamma(yf + size) - ln_gamma(size) - ln_gamma(yf + 1.0)
        - size * (mean / size).ln_1p()
        + yf * (mean.ln() - (size + mean).ln()))
}

/// Poisson log pmf; `rate = 0` is degenerate at zero.
pub fn poisson_logpmf(y: u64, rate: f64) -> Result<f64> {
    if !(rate >= 0.0) {
        return Err(Error::Domain(format!("poisson rate {rate} must be >= 0")));
    }
    if rate == 0.0 {
        return Ok(if y == 0 { 0.0 } else { f64::NEG_INFINITY });
    }
    let yf = y as f64;
    Ok(yf * rate.ln() - rate - ln_gamma(yf + 1.0))
}

/// Normal log density.
pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> Result<f64> {
    if !(sd > 0.0) {
        return Err(Error::Domain(format!("normal sd {sd} must be > 0")));
    }
    let z = (x - mean) / sd;
    Ok(-0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - 0.5 * z * z)
}
