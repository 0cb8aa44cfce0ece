//! Independent oracles shared by the integration tests. Nothing here calls
//! the estimators under test.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use brwre::tilt::CenteringTable;

/// Fixed point of `φ = ½/(1 − V − φ/2)` for constant potential `V`.
pub fn phi_star(v: f64) -> f64 {
    let a = 1.0 - v;
    a - (a * a - 1.0).sqrt()
}

/// `L(η) = ln φ*(η)` for ζ ≡ 0 and its first two η-derivatives, in closed form.
pub fn closed_form_l(eta: f64) -> (f64, f64, f64) {
    let a = 1.0 - eta;
    let s2 = a * a - 1.0;
    ((a - s2.sqrt()).ln(), 1.0 / s2.sqrt(), a / s2.powf(1.5))
}

/// Central finite difference.
pub fn diff<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

pub fn diff2<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

/// Speed of the homogeneous branching walk with jump rate 1 and branching
/// rate β: the root `v > 0` of `sup_θ(θv − (cosh θ − 1)) = β`, i.e.
/// `v asinh v − √(1 + v²) + 1 = β`, by bisection.
pub fn homogeneous_speed(beta: f64) -> f64 {
    let f = |v: f64| v * v.asinh() - (1.0 + v * v).sqrt() + 1.0 - beta;
    let (mut lo, mut hi) = (0.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Sample mean, standard error of the mean, sample variance and the
/// standard error of the sample variance.
pub fn moments(x: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    (mean, (var / n).sqrt(), var, ((m4 - var * var) / n).sqrt())
}

/// Fine-grid estimate of the `p_n` event: Gaussian increments on a grid of
/// step `1/substeps` inside each unit interval, barrier `W` interpolated
/// linearly, monitored only at grid points. Discrete monitoring misses
/// crossings between grid points; the barrier is shifted up by
/// `0.5826 ξ_k √Δ` (the Broadie–Glasserman–Kou continuity correction),
/// which removes the leading `O(√Δ)` error.
pub fn grid_p_n(table: &CenteringTable<f64>, y0: f64, n: usize, substeps: usize, reps: usize, seed: u64) -> (f64, f64) {
    const BGK: f64 = 0.582_597_157_939_010_7;
    let dt = 1.0 / substeps as f64;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    'path: for _ in 0..reps {
        let mut z = y0;
        for k in 1..=n {
            let sd = (table.xi2[k] * dt).sqrt();
            let shift = BGK * sd;
            for j in 1..=substeps {
                z += sd * rng.sample::<f64, _>(StandardNormal);
                let s = j as f64 * dt;
                let w = table.w[k - 1] + (table.w[k] - table.w[k - 1]) * s;
                if z < w + shift {
                    continue 'path;
                }
            }
        }
        let end = z - table.w[n];
        if end >= y0 - 1.0 && end <= y0 {
            hits += 1;
        }
    }
    let p = hits as f64 / reps as f64;
    (p, (p * (1.0 - p) / reps as f64).sqrt())
}

/// `|a − b| ≤ k·√(se_a² + se_b²)`.
pub fn within(a: f64, se_a: f64, b: f64, se_b: f64, k: f64) -> bool {
    (a - b).abs() <= k * se_a.hypot(se_b)
}
