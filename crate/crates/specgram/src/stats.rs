//! Small statistical helpers: Gaussian quantiles, Kolmogorov distances and
//! order-independent moment summaries.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal is valid")
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

/// Standard normal quantile, polished by one Newton step against [`normal_cdf`].
pub fn normal_quantile(p: f64) -> f64 {
    let dist = standard_normal();
    let x = dist.inverse_cdf(p);
    if !x.is_finite() {
        return x;
    }
    x - (dist.cdf(x) - p) / dist.pdf(x)
}

/// Pairwise (cascade) summation; the result depends only on the order of `values`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Sample moments with standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
}

impl Moments {
    /// Computes mean, unbiased variance and their standard errors.
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        let n = count as f64;
        let mean = pairwise_sum(values) / n;
        let centered2: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
        let centered4: Vec<f64> = centered2.iter().map(|v| v * v).collect();
        let m2 = pairwise_sum(&centered2) / n;
        let m4 = pairwise_sum(&centered4) / n;
        let variance = if count > 1 { m2 * n / (n - 1.0) } else { 0.0 };
        Self {
            count,
            mean,
            mean_se: (variance / n).sqrt(),
            variance,
            variance_se: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
        }
    }
}

/// Kolmogorov distance between the empirical CDF of `samples` and `cdf`.
pub fn kolmogorov_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let f = cdf(x);
            (f - k as f64 / n).abs().max(((k + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Kolmogorov distance of `samples` to the standard normal law.
pub fn kolmogorov_to_normal(samples: &[f64]) -> f64 {
    kolmogorov_distance(samples, normal_cdf)
}
