//! Empirical distributions and the small set of statistics the experiments need.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Sorted sample with quantiles by linear interpolation of order statistics
/// (`h = (N − 1) q`, the usual "type 7" rule).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution<T> {
    samples: Vec<T>,
}

impl<T: Scalar> EmpiricalDistribution<T> {
    pub fn new(mut samples: Vec<T>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::param("empirical distribution needs at least one sample"));
        }
        if samples.iter().any(|v| v.is_nan()) {
            return Err(Error::param("empirical distribution received NaN"));
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(EmpiricalDistribution { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn quantile(&self, q: f64) -> T {
        quantile_sorted(&self.samples, q)
    }

    pub fn median(&self) -> T {
        self.quantile(0.5)
    }

    pub fn iqr(&self) -> T {
        self.quantile(0.75) - self.quantile(0.25)
    }

    pub fn mean(&self) -> T {
        self.samples.iter().fold(T::zero(), |a, b| a + *b) / T::from_usize_lossy(self.len())
    }

    /// Empirical CDF at `x`.
    pub fn cdf(&self, x: T) -> f64 {
        self.samples.partition_point(|v| *v <= x) as f64 / self.len() as f64
    }
}

/// Type-7 quantile of an already sorted slice.
pub fn quantile_sorted<T: Scalar>(sorted: &[T], q: f64) -> T {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let q = q.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = T::lit(h - lo as f64);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Bootstrap standard error of a quantile.
pub fn bootstrap_quantile_se(samples: &[f64], q: f64, resamples: usize, seed: u64) -> f64 {
    if samples.len() < 2 || resamples < 2 {
        return 0.0;
    }
    let mut rng = rng::stream(seed, 0);
    let mut buf = vec![0.0; samples.len()];
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for slot in buf.iter_mut() {
            *slot = samples[rng.random_range(0..samples.len())];
        }
        buf.sort_by(f64::total_cmp);
        stats.push(quantile_sorted(&buf, q));
    }
    mean_and_sd(&stats).1
}

/// Bootstrap standard error of `stat` evaluated on resampled index sets of
/// `0..len`; resampling indices keeps paired samples paired.
pub fn bootstrap_se<F: FnMut(&[usize]) -> f64>(len: usize, resamples: usize, seed: u64, mut stat: F) -> f64 {
    if len < 2 || resamples < 2 {
        return 0.0;
    }
    let mut rng = rng::stream(seed, 1);
    let mut idx = vec![0usize; len];
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..len);
        }
        stats.push(stat(&idx));
    }
    mean_and_sd(&stats).1
}

/// Sample mean and (n − 1)-normalised standard deviation.
pub fn mean_and_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let ss = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Mean and its standard error.
pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let (m, sd) = mean_and_sd(x);
    (m, sd / (x.len() as f64).sqrt())
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < na && j < nb {
        let x = a[i].min(b[j]);
        while i < na && a[i] <= x {
            i += 1;
        }
        while j < nb && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_q(lambda))
}

/// Tail of the Kolmogorov distribution, `2 Σ (−1)^{j−1} e^{−2 j² λ²}`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Least-squares line through `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope from the residual scatter.
    pub slope_se: f64,
    pub rss: f64,
}

pub fn least_squares(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::param("least squares needs two or more paired points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::param("least squares needs distinct abscissae"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let slope_se = if x.len() > 2 { (rss / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(LineFit {
        slope,
        intercept,
        slope_se,
        rss,
    })
}

/// Weighted least squares with known per-point standard errors; the slope
/// error is propagated from those errors rather than the residuals.
pub fn weighted_least_squares(x: &[f64], y: &[f64], se: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() || x.len() != se.len() || x.len() < 2 {
        return Err(Error::param("weighted least squares needs matching inputs of length ≥ 2"));
    }
    if se.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::param("weighted least squares needs positive finite errors"));
    }
    let w: Vec<f64> = se.iter().map(|s| 1.0 / (s * s)).collect();
    let sw: f64 = w.iter().sum();
    let mx = w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() / sw;
    let my = w.iter().zip(y).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * (x - mx).powi(2)).sum();
    let sxy: f64 = w.iter().zip(x.iter().zip(y)).map(|(w, (x, y))| w * (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss = w
        .iter()
        .zip(x.iter().zip(y))
        .map(|(w, (x, y))| w * (y - intercept - slope * x).powi(2))
        .sum();
    Ok(LineFit {
        slope,
        intercept,
        slope_se: sxx.recip().sqrt(),
        rss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quantile_rule() {
        let d = EmpiricalDistribution::new(vec![3.0, 1.0, 2.0]).unwrap();
        assert_eq!(d.median(), 2.0);
        let d = EmpiricalDistribution::new(vec![0.0, 3.0, 1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(d.quantile(0.25), 0.75, epsilon = 1e-15);
        assert_eq!(d.quantile(0.0), 0.0);
        assert_eq!(d.quantile(1.0), 3.0);
        assert_eq!(d.cdf(1.0), 0.5);
    }

    #[test]
    fn rejects_nan_and_empty() {
        assert!(EmpiricalDistribution::<f64>::new(vec![]).is_err());
        assert!(EmpiricalDistribution::new(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn ks_identical_and_shifted() {
        let a: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let (d, p) = ks_two_sample(&a, &a);
        assert_eq!(d, 0.0);
        assert_eq!(p, 1.0);
        let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
        let (d, p) = ks_two_sample(&a, &b);
        assert_abs_diff_eq!(d, 0.502, epsilon = 1e-12);
        assert!(p < 1e-10);
    }

    #[test]
    fn kolmogorov_tail_reference() {
        // 1.3581 is the textbook 5% critical point.
        assert_abs_diff_eq!(kolmogorov_q(1.3581), 0.05, epsilon = 1e-4);
    }

    #[test]
    fn exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let fit = least_squares(&x, &y).unwrap();
        assert_abs_diff_eq!(fit.slope, 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(fit.intercept, -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(fit.slope_se, 0.0, epsilon = 1e-14);
        let w = weighted_least_squares(&x, &y, &[1.0; 4]).unwrap();
        assert_abs_diff_eq!(w.slope, 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(w.slope_se, 0.2f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn bootstrap_median_se_is_reasonable() {
        let x: Vec<f64> = (0..400).map(|i| ((i * 7919) % 400) as f64 / 400.0).collect();
        let se = bootstrap_quantile_se(&x, 0.5, 400, 1);
        // Uniform(0, 1): se of the median ≈ 1 / (2 f √n) = 0.025.
        assert!(se > 0.015 && se < 0.035, "{se}");
    }
}
