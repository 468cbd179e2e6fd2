//! Empirical error statistics.

use serde::{Deserialize, Serialize};

/// Nearest-rank quantile of an ascending slice: the smallest value with at
/// least `q·n` values at or below it.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    Some(sorted[rank - 1])
}

/// Empirical CDF points `(error, fraction ≤ error)`, one per distinct error.
pub fn error_cdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = errors.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (i, &e) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == e => last.1 = frac,
            _ => out.push((e, frac)),
        }
    }
    out
}

/// CSV with header `error_m,cum_frac`.
pub fn cdf_csv(cdf: &[(f64, f64)]) -> String {
    let mut s = String::from("error_m,cum_frac\n");
    for (e, f) in cdf {
        s.push_str(&format!("{e},{f}\n"));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q50: f64,
    pub q90: f64,
    pub q99: f64,
}

impl Quantiles {
    pub fn of(errors: &[f64]) -> Option<Self> {
        let mut v = errors.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Quantiles {
            q50: quantile(&v, 0.5)?,
            q90: quantile(&v, 0.9)?,
            q99: quantile(&v, 0.99)?,
        })
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}
