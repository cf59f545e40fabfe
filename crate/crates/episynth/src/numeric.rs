//! Small numerical helpers used throughout the crate: summaries of draws,
//! stable log-space reductions, quadrature, and the two pieces of dense
//! linear algebra the samplers need (Cholesky factors and a power iteration).

use crate::error::{Error, Result};

/// log(sum(exp(x))) without overflow. Returns -inf for an empty slice or a
/// slice of -inf values.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two points.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn sd(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Quantile with linear interpolation between order statistics (the common
/// "type 7" rule). `q` is clamped to [0, 1].
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty(), "quantile of empty slice");
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("NaN in quantile input"));
    let q = q.clamp(0.0, 1.0);
    let h = q * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Quantile of a weighted sample. Weights need not be normalized.
pub fn weighted_quantile(xs: &[f64], ws: &[f64], q: f64) -> f64 {
    assert_eq!(xs.len(), ws.len());
    assert!(!xs.is_empty());
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("NaN in quantile input"));
    let total: f64 = ws.iter().sum();
    let target = q.clamp(0.0, 1.0) * total;
    let mut cum = 0.0;
    for &i in &idx {
        cum += ws[i];
        if cum >= target {
            return xs[i];
        }
    }
    xs[*idx.last().unwrap()]
}

pub fn weighted_mean(xs: &[f64], ws: &[f64]) -> f64 {
    let total: f64 = ws.iter().sum();
    xs.iter().zip(ws).map(|(x, w)| x * w).sum::<f64>() / total
}

/// Composite Simpson quadrature of `f` over [a, b] with `n` panels
/// (`n` is rounded up to the next even number).
pub fn simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n.max(2) } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix,
/// stored dense row-major. Fails on non-positive pivots.
pub fn cholesky(a: &[f64], dim: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), dim * dim);
    let mut l = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = a[i * dim + j];
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Domain(format!(
                        "matrix not positive definite at pivot {i} (value {s:.3e})"
                    )));
                }
                l[i * dim + j] = s.sqrt();
            } else {
                l[i * dim + j] = s / l[j * dim + j];
            }
        }
    }
    Ok(l)
}

/// y = L z for a lower-triangular factor from [`cholesky`].
pub fn tril_mul(l: &[f64], z: &[f64], dim: usize) -> Vec<f64> {
    let mut y = vec![0.0; dim];
    for i in 0..dim {
        let mut s = 0.0;
        for j in 0..=i {
            s += l[i * dim + j] * z[j];
        }
        y[i] = s;
    }
    y
}

/// Dominant eigenvalue of a nonnegative square matrix by power iteration.
pub fn spectral_radius(a: &[f64], dim: usize) -> f64 {
    assert_eq!(a.len(), dim * dim);
    let mut v = vec![1.0 / dim as f64; dim];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut w = vec![0.0; dim];
        for i in 0..dim {
            for j in 0..dim {
                w[i] += a[i * dim + j] * v[j];
            }
        }
        let norm: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for x in &mut w {
            *x /= norm;
        }
        let prev = lambda;
        lambda = norm;
        v = w;
        if (lambda - prev).abs() <= 1e-13 * lambda.abs().max(1.0) {
            break;
        }
    }
    lambda
}

/// Pearson chi-square goodness-of-fit p-value for observed bin counts against
/// bin probabilities that partition the sample space. Degrees of freedom are
/// bins minus one; the caller is responsible for merging bins too small for
/// the chi-square approximation.
pub fn chi_square_pvalue(observed: &[u64], probs: &[f64]) -> Result<f64> {
    if observed.len() != probs.len() || observed.len() < 2 {
        return Err(Error::Domain(format!(
            "{} observed bins against {} probabilities",
            observed.len(),
            probs.len()
        )));
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(p > 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!(
            "bin probabilities must be positive and sum to 1, got {total}"
        )));
    }
    let n: u64 = observed.iter().sum();
    if n == 0 {
        return Err(Error::Domain("no observations to test".into()));
    }
    let stat: f64 = observed
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let e = n as f64 * p;
            let d = o as f64 - e;
            d * d / e
        })
        .sum();
    let df = (observed.len() - 1) as f64;
    Ok(statrs::function::gamma::gamma_ur(df / 2.0, stat / 2.0))
}

/// Kolmogorov-Smirnov distance of a sample against Uniform(0, 1), together
/// with the two-sided asymptotic p-value using Stephens' finite-sample
/// rescaling of the Kolmogorov distribution.
pub fn ks_uniform(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Config("KS test needs at least one value".into()));
    }
    if let Some(&x) = xs.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::Domain(format!(
            "KS test against Uniform(0, 1) needs values in [0, 1], got {x}"
        )));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        d = d.max(x - i as f64 / n).max((i as f64 + 1.0) / n - x);
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    Ok((d, kolmogorov_q(lambda)))
}

/// Kolmogorov tail probability Q(lambda) = 2 sum_k (-1)^(k-1) exp(-2 k^2 lambda^2).
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100u32 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Indices of local maxima at least `min_height` tall. A plateau counts once,
/// at its right edge; endpoints never count.
pub fn local_maxima(xs: &[f64], min_height: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut rising = false;
    for i in 1..xs.len() {
        if xs[i] > xs[i - 1] {
            rising = true;
        } else if xs[i] < xs[i - 1] {
            if rising && xs[i - 1] >= min_height {
                out.push(i - 1);
            }
            rising = false;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let xs = [-1.0f64, 0.5, 2.0];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum();
        assert_relative_eq!(log_sum_exp(&xs), direct.ln(), epsilon = 1e-12);
    }

    #[test]
    fn log_sum_exp_handles_large_magnitudes() {
        let xs = [-1000.0, -1000.0];
        assert_relative_eq!(log_sum_exp(&xs), -1000.0 + 2.0f64.ln(), epsilon = 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn quantile_interpolates() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(quantile(&xs, 0.5), 2.5);
        assert_relative_eq!(quantile(&xs, 0.0), 1.0);
        assert_relative_eq!(quantile(&xs, 1.0), 4.0);
    }

    #[test]
    fn weighted_quantile_respects_weights() {
        let xs = [1.0, 2.0, 3.0];
        let ws = [0.0, 1.0, 0.0];
        assert_eq!(weighted_quantile(&xs, &ws, 0.5), 2.0);
    }

    #[test]
    fn simpson_integrates_cubic_exactly() {
        // Simpson is exact for cubics.
        let v = simpson(|x| x * x * x, 0.0, 2.0, 8);
        assert_relative_eq!(v, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn cholesky_roundtrip() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        // reconstruct L L^T
        let mut r = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    r[i * 2 + j] += l[i * 2 + k] * l[j * 2 + k];
                }
            }
        }
        for (x, y) in r.iter().zip(a.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = [1.0, 2.0, 2.0, 1.0];
        assert!(cholesky(&a, 2).is_err());
    }

    #[test]
    fn spectral_radius_of_known_matrix() {
        // eigenvalues 3 and 1
        let a = [2.0, 1.0, 1.0, 2.0];
        assert_relative_eq!(spectral_radius(&a, 2), 3.0, epsilon = 1e-9);
    }

    #[test]
    fn chi_square_accepts_matching_counts() {
        // counts drawn (by hand) close to 1000 * p
        let observed = [248u64, 260, 247, 245];
        let probs = [0.25; 4];
        let p = chi_square_pvalue(&observed, &probs).unwrap();
        assert!(p > 0.5, "p = {p}");
    }

    #[test]
    fn chi_square_rejects_biased_counts() {
        let observed = [400u64, 200, 200, 200];
        let probs = [0.25; 4];
        let p = chi_square_pvalue(&observed, &probs).unwrap();
        assert!(p < 1e-6, "p = {p}");
    }

    #[test]
    fn chi_square_statistic_matches_known_tail() {
        // one degree of freedom: P(chi2 > x) = 2 (1 - Phi(sqrt(x)))
        let observed = [60u64, 40];
        let probs = [0.5, 0.5];
        let p = chi_square_pvalue(&observed, &probs).unwrap();
        // statistic = (10^2)/50 + (10^2)/50 = 4, tail = 0.0455
        assert_relative_eq!(p, 0.04550026, epsilon = 1e-6);
    }

    #[test]
    fn kolmogorov_tail_matches_tabulated_values() {
        // 2 * (exp(-2 * 0.25) - exp(-8 * 0.25) + exp(-18 * 0.25) - ...)
        assert_relative_eq!(kolmogorov_q(0.5), 0.9639, epsilon = 1e-4);
        assert_relative_eq!(kolmogorov_q(1.36), 0.0494, epsilon = 1e-4);
        assert_eq!(kolmogorov_q(0.0), 1.0);
        assert!(kolmogorov_q(3.0) < 1e-6);
    }

    #[test]
    fn ks_accepts_an_evenly_spread_sample() {
        let n = 100;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let (d, p) = ks_uniform(&xs).unwrap();
        assert_relative_eq!(d, 0.005, epsilon = 1e-12);
        assert!(p > 0.999, "p = {p}");
    }

    #[test]
    fn ks_rejects_a_point_mass() {
        let xs = vec![0.5; 50];
        let (d, p) = ks_uniform(&xs).unwrap();
        assert_relative_eq!(d, 0.5, epsilon = 1e-12);
        assert!(p < 1e-10, "p = {p}");
    }

    #[test]
    fn ks_rejects_values_outside_the_unit_interval() {
        assert!(ks_uniform(&[0.2, 1.4]).is_err());
        assert!(ks_uniform(&[]).is_err());
    }
}
