//! Small statistics helpers used by the scaling-limit diagnostics and tests:
//! Kolmogorov-Smirnov tests, paired t-test and least-squares slope fitting.

use crate::error::{Error, Result};

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of the sample mean.
pub fn standard_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// Asymptotic Kolmogorov survival function `P(K > x)`.
fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-1.0f64).powi(k + 1) * (-2.0 * (k as f64 * x).powi(2)).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test of `xs` against a cdf; returns `(statistic, p_value)`.
pub fn ks_test(xs: &[f64], cdf: impl Fn(f64) -> f64) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::InsufficientData("KS test needs at least 2 samples".into()));
    }
    let n = xs.len() as f64;
    let v = sorted(xs);
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    Ok((d, kolmogorov_sf(n.sqrt() * d)))
}

/// Two-sample KS test; returns `(statistic, p_value)`.
pub fn ks_two_sample(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() < 2 || ys.len() < 2 {
        return Err(Error::InsufficientData("KS test needs at least 2 samples per side".into()));
    }
    let a = sorted(xs);
    let b = sorted(ys);
    let (n, m) = (a.len(), b.len());
    let mut d: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < n && j < m {
        let t = a[i].min(b[j]);
        while i < n && a[i] <= t {
            i += 1;
        }
        while j < m && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let neff = (n * m) as f64 / (n + m) as f64;
    Ok((d, kolmogorov_sf(neff.sqrt() * d)))
}

/// One-sided paired t statistic for H1: mean(xs) > mean(ys).
/// Returns `(t_statistic, degrees_of_freedom)`.
pub fn paired_t_statistic(xs: &[f64], ys: &[f64]) -> Result<(f64, usize)> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch("paired samples must have equal length".into()));
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientData("paired t-test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x - y).collect();
    let se = standard_error(&diffs);
    if se == 0.0 {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    Ok((mean(&diffs) / se, diffs.len() - 1))
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch("regression inputs must have equal length".into()));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData("regression needs at least 2 points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|xi| (xi - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("regression abscissae are constant".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(xi, yi)| (xi - mx) * (yi - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}
