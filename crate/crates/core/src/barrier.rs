//! Gaussian barrier engine.
//!
//! `B` is a centred Gaussian process with independent increments of variance
//! `ξ_k²` on `[k − 1, k]`. A barrier event asks that the clearance
//! `y + B_s − f(s)` stays nonnegative for all `s ∈ [0, n]` and ends in an
//! interval `J`, with `f` the chord through its integer-time values.
//!
//! Between integer times the path is a Brownian bridge, so crossing is
//! handled exactly: a segment with endpoint clearances `d, d'` survives with
//! probability `1 − exp(−2 d d'/ξ²)`. Paths carry the product of these
//! factors as a weight. The last segment is integrated against `J` in closed
//! form instead of being sampled.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tilt::CenteringTable;

/// Paths per RNG stream; also the unit of parallel work.
const BATCH: usize = 2048;

/// Local variances `ξ_k²`, indexed by level with entry 0 unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussLaw<T> {
    pub xi2: Vec<T>,
}

impl<T: Scalar> GaussLaw<T> {
    pub fn new(xi2: Vec<T>) -> Result<Self> {
        if xi2.is_empty() {
            return Err(Error::param("Gaussian law needs xi2[0..=n]"));
        }
        if let Some(k) = (1..xi2.len()).find(|&k| !(xi2[k] > T::zero() && xi2[k].is_finite())) {
            return Err(Error::param(format!("xi2[{k}] = {} must be positive and finite", xi2[k])));
        }
        Ok(GaussLaw { xi2 })
    }

    pub fn from_table(table: &CenteringTable<T>, n: usize) -> Result<Self> {
        if n > table.n {
            return Err(Error::param(format!("table has {} levels, {n} requested", table.n)));
        }
        let mut xi2 = table.xi2[..=n].to_vec();
        xi2[0] = T::zero();
        Self::new(xi2)
    }

    pub fn homogeneous(n: usize, var: T) -> Result<Self> {
        let mut xi2 = vec![var; n + 1];
        xi2[0] = T::zero();
        Self::new(xi2)
    }

    pub fn n(&self) -> usize {
        self.xi2.len() - 1
    }

    /// `σ_k² = Σ_{j≤k} ξ_j²`.
    pub fn sigma2(&self, k: usize) -> T {
        self.xi2[1..=k].iter().fold(T::zero(), |a, b| a + *b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Linear,
    VarianceAdapted,
}

/// Barrier values at integer times `0..=n`.
///
/// Within a unit segment the variance-adapted interpolation reduces to the
/// chord, so both modes evaluate identically between integers; the mode
/// matters when a profile is built from sparse knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierProfile<T> {
    pub values: Vec<T>,
    pub interp: Interp,
    pub label: String,
    /// Variances a variance-adapted profile was built against.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapted_to: Option<Vec<T>>,
}

impl<T: Scalar> BarrierProfile<T> {
    pub fn from_values(values: Vec<T>, label: impl Into<String>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("barrier values must be finite and non-empty"));
        }
        Ok(BarrierProfile {
            values,
            interp: Interp::Linear,
            label: label.into(),
            adapted_to: None,
        })
    }

    pub fn constant(n: usize, level: T, label: impl Into<String>) -> Self {
        Self::from_values(vec![level; n + 1], label).expect("finite constant")
    }

    pub fn zero(n: usize) -> Self {
        Self::constant(n, T::zero(), "zero")
    }

    /// Profile through `knots` (sorted times, first at 0, last at n),
    /// interpolated linearly or adapted to the variances `xi2`.
    pub fn from_knots(knots: &[(usize, T)], interp: Interp, xi2: Option<&[T]>, label: impl Into<String>) -> Result<Self> {
        if knots.len() < 2 || knots[0].0 != 0 || knots.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::param("knots must start at 0 and have increasing times"));
        }
        let n = knots.last().unwrap().0;
        let adapted = match interp {
            Interp::Linear => None,
            Interp::VarianceAdapted => {
                let xi2 = xi2.ok_or_else(|| Error::param("variance-adapted interpolation needs xi2"))?;
                if xi2.len() != n + 1 {
                    return Err(Error::param(format!(
                        "variance-adapted interpolation needs xi2 of length {}, got {}",
                        n + 1,
                        xi2.len()
                    )));
                }
                Some(xi2.to_vec())
            }
        };
        let mut values = vec![T::zero(); n + 1];
        for w in knots.windows(2) {
            let ((t1, x1), (t2, x2)) = (w[0], w[1]);
            for (k, slot) in values.iter_mut().enumerate().take(t2 + 1).skip(t1) {
                *slot = match &adapted {
                    None => {
                        let frac = T::from_usize_lossy(k - t1) / T::from_usize_lossy(t2 - t1);
                        x1 + (x2 - x1) * frac
                    }
                    Some(xi2) => adapted_interpolation(t1, t2, x1, x2, xi2, T::from_usize_lossy(k)),
                };
            }
        }
        let mut p = Self::from_values(values, label)?;
        p.interp = interp;
        p.adapted_to = adapted;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.values.len() - 1
    }

    #[inline]
    pub fn value(&self, k: usize) -> T {
        self.values[k]
    }

    /// Chord value at real time `s ∈ [0, n]`.
    pub fn at(&self, s: T) -> T {
        let n = self.n();
        if n == 0 {
            return self.values[0];
        }
        let s = s.max(T::zero()).min(T::from_usize_lossy(n));
        let k = s.floor().to_usize().unwrap_or(0).min(n - 1);
        let frac = s - T::from_usize_lossy(k);
        self.values[k] + (self.values[k + 1] - self.values[k]) * frac
    }

    pub fn negated(&self) -> Self {
        let mut p = self.clone();
        p.values.iter_mut().for_each(|v| *v = -*v);
        p
    }

    /// True if the values are nondecreasing in k.
    pub fn is_nondecreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] >= w[0])
    }
}

/// Interpolation between `(t1, x1)` and `(t2, x2)` whose weights follow the
/// accumulated variance rather than elapsed time. `xi2` is indexed by level.
pub fn adapted_interpolation<T: Scalar>(t1: usize, t2: usize, x1: T, x2: T, xi2: &[T], s: T) -> T {
    assert!(t1 < t2 && t2 < xi2.len(), "bad adapted interpolation window");
    let sum = |a: usize, b: usize| (a..=b).fold(T::zero(), |acc, k| acc + xi2[k]);
    let total = sum(t1 + 1, t2);
    let lo = s.floor().to_usize().expect("time is nonnegative");
    let hi = s.ceil().to_usize().expect("time is nonnegative");
    let tail = if hi < t2 { sum(hi + 1, t2) } else { T::zero() };
    let head = if lo > t1 { sum(t1 + 1, lo) } else { T::zero() };
    let cell = if hi > t1 { xi2[hi] } else { T::zero() };
    let w1 = (tail + (T::from_usize_lossy(hi) - s) * cell) / total;
    let w2 = ((s - T::from_usize_lossy(lo)) * cell + head) / total;
    x1 * w1 + x2 * w2
}

/// End interval for the clearance at time n; bounds may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndInterval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> EndInterval<T> {
    pub fn new(lo: T, hi: T) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::param(format!("empty end interval [{lo}, {hi}]")));
        }
        Ok(EndInterval { lo, hi })
    }

    pub fn all() -> Self {
        EndInterval {
            lo: T::neg_infinity(),
            hi: T::infinity(),
        }
    }

    /// `J_x = [x − 1, x]`.
    pub fn unit_below(x: T) -> Self {
        EndInterval { lo: x - T::one(), hi: x }
    }

    pub fn point(c: T) -> Self {
        EndInterval { lo: c, hi: c }
    }

    pub fn is_point(&self) -> bool {
        self.lo == self.hi
    }

    pub fn contains(&self, v: T) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// `{∀s: y + Z_s − f(s) ≥ 0, y + Z_n − f(n) ∈ J}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierEvent<T> {
    pub start_y: T,
    pub end: EndInterval<T>,
    pub profile: BarrierProfile<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbEstimate {
    pub p_hat: f64,
    pub se: f64,
    pub reps: usize,
    pub seed: u64,
}

impl ProbEstimate {
    pub fn rel_se(&self) -> f64 {
        if self.p_hat > 0.0 {
            self.se / self.p_hat
        } else {
            f64::INFINITY
        }
    }

    /// Replicates needed for a relative standard error of `target`.
    pub fn required_reps(&self, target: f64) -> usize {
        let r = self.rel_se();
        if !r.is_finite() {
            return usize::MAX;
        }
        ((r / target).powi(2) * self.reps as f64).ceil() as usize
    }

    /// `ln p̂`, optionally with the second-order bias correction
    /// `+ se²/(2 p̂²)` for the logarithm of a noisy estimate.
    pub fn ln_p(&self, jensen: bool) -> f64 {
        let l = self.p_hat.ln();
        if jensen {
            l + 0.5 * self.rel_se().powi(2)
        } else {
            l
        }
    }

    fn from_sums(sum: f64, sumsq: f64, reps: usize, seed: u64) -> Self {
        let n = reps as f64;
        let mean = sum / n;
        let var = if reps > 1 {
            ((sumsq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        ProbEstimate {
            p_hat: mean.clamp(0.0, 1.0),
            se: (var / n).sqrt(),
            reps,
            seed,
        }
    }
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn norm_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `Φ(u) − Φ(l)` without cancellation in either tail.
pub fn norm_interval(l: f64, u: f64) -> f64 {
    if u <= l {
        0.0
    } else if l >= 0.0 {
        norm_sf(l) - norm_sf(u)
    } else if u <= 0.0 {
        norm_cdf(u) - norm_cdf(l)
    } else {
        1.0 - norm_sf(u) - norm_cdf(l)
    }
}

/// Probability that a Brownian bridge with endpoint clearances `d0, d1 > 0`
/// and variance `var` stays positive.
#[inline]
pub fn bridge_survival(d0: f64, d1: f64, var: f64) -> f64 {
    let x = 2.0 * d0 * d1 / var;
    if d0 <= 0.0 || d1 <= 0.0 {
        0.0
    } else if x > 40.0 {
        // e^{-40} is below half an ulp of 1.
        1.0
    } else {
        -(-x).exp_m1()
    }
}

/// Last segment: clearance starts at `d0 > 0`, moves by `N(mu, var)` and must
/// stay positive and end in `[lo, hi]`. Returns the probability.
pub fn final_segment(d0: f64, mu: f64, var: f64, lo: f64, hi: f64) -> f64 {
    let a = lo.max(0.0);
    if d0 <= 0.0 || hi <= a {
        return 0.0;
    }
    let s = var.sqrt();
    let m = d0 + mu;
    // The reflected term never exceeds the direct one, and the direct mass
    // is below 1e-19 once J lies 9 sd from the mean.
    if hi - m < -9.0 * s || a - m > 9.0 * s {
        return 0.0;
    }
    let mp = mu - d0;
    let direct = norm_interval((a - m) / s, (hi - m) / s);
    let reflected = norm_interval((a - mp) / s, (hi - mp) / s);
    let image = if reflected > 0.0 {
        (-2.0 * d0 * mu / var + reflected.ln()).exp()
    } else {
        0.0
    };
    (direct - image).max(0.0)
}

struct Segments {
    sd: Vec<f64>,
    var: Vec<f64>,
    /// Mean change of the clearance, `f(k − 1) − f(k)`.
    drift: Vec<f64>,
}

impl Segments {
    fn new(law: &GaussLaw<f64>, profile: &BarrierProfile<f64>) -> Self {
        let n = law.n();
        let mut s = Segments {
            sd: vec![0.0; n + 1],
            var: vec![0.0; n + 1],
            drift: vec![0.0; n + 1],
        };
        for k in 1..=n {
            s.var[k] = law.xi2[k];
            s.sd[k] = law.xi2[k].sqrt();
            s.drift[k] = profile.values[k - 1] - profile.values[k];
        }
        s
    }
}

fn check_event(law: &GaussLaw<f64>, event: &BarrierEvent<f64>, reps: usize) -> Result<()> {
    if reps == 0 {
        return Err(Error::param("reps must be positive"));
    }
    if event.profile.n() != law.n() {
        return Err(Error::param(format!(
            "barrier has {} segments but the law has {}",
            event.profile.n(),
            law.n()
        )));
    }
    if let Some(adapted) = &event.profile.adapted_to {
        let same = adapted.len() == law.xi2.len() && adapted.iter().zip(&law.xi2).skip(1).all(|(a, b)| a == b);
        if !same {
            return Err(Error::param("variance-adapted barrier was built for a different xi2"));
        }
    }
    EndInterval::new(event.end.lo, event.end.hi)?;
    Ok(())
}

fn batches(reps: usize) -> impl IndexedParallelIterator<Item = (usize, usize)> {
    let count = reps.div_ceil(BATCH);
    (0..count).into_par_iter().map(move |b| (b, BATCH.min(reps - b * BATCH)))
}

/// Weighted Monte Carlo estimate of a Gaussian barrier event.
///
/// A point interval `J = [c, c]` pins the endpoint: the result is then the
/// probability conditional on the end clearance being `c`, obtained by
/// weighting with the ratio of last-step to total transition densities.
pub fn estimate_barrier_prob_gauss(
    law: &GaussLaw<f64>,
    event: &BarrierEvent<f64>,
    reps: usize,
    seed: u64,
) -> Result<ProbEstimate> {
    check_event(law, event, reps)?;
    let n = law.n();
    let d0 = event.start_y - event.profile.values[0];
    if n == 0 {
        let p = if d0 >= 0.0 && event.end.contains(d0) { 1.0 } else { 0.0 };
        return Ok(ProbEstimate {
            p_hat: p,
            se: 0.0,
            reps,
            seed,
        });
    }
    let seg = Segments::new(law, &event.profile);
    let end = event.end;
    let total_density = if end.is_point() {
        let total_mean = d0 + seg.drift[1..].iter().sum::<f64>();
        let total_sd = law.sigma2(n).sqrt();
        norm_pdf((end.lo - total_mean) / total_sd) / total_sd
    } else {
        1.0
    };
    let last = |d: f64| -> f64 {
        if end.is_point() {
            let c = end.lo;
            if c <= 0.0 || total_density == 0.0 {
                return 0.0;
            }
            let step = norm_pdf((c - d - seg.drift[n]) / seg.sd[n]) / seg.sd[n];
            step / total_density * bridge_survival(d, c, seg.var[n])
        } else {
            final_segment(d, seg.drift[n], seg.var[n], end.lo, end.hi)
        }
    };
    let sums: Vec<(f64, f64)> = batches(reps)
        .map(|(b, size)| {
            let mut r = rng::stream(seed, b as u64);
            let (mut s, mut ss) = (0.0, 0.0);
            for _ in 0..size {
                let mut w = if d0 > 0.0 { 1.0 } else { 0.0 };
                let mut d = d0;
                for k in 1..n {
                    if w == 0.0 {
                        break;
                    }
                    let z: f64 = r.sample(StandardNormal);
                    let next = d + seg.drift[k] + seg.sd[k] * z;
                    w *= bridge_survival(d, next, seg.var[k]);
                    d = next;
                }
                if w > 0.0 {
                    w *= last(d);
                }
                s += w;
                ss += w * w;
            }
            (s, ss)
        })
        .collect();
    let (s, ss) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(ProbEstimate::from_sums(s, ss, reps, seed))
}

fn p_n_event(table: &CenteringTable<f64>, y0: i64, n: usize) -> Result<(GaussLaw<f64>, BarrierEvent<f64>)> {
    if y0 < crate::MIN_Y0 {
        return Err(Error::param(format!("y0 = {y0} is below the minimum {}", crate::MIN_Y0)));
    }
    let law = GaussLaw::from_table(table, n)?;
    let profile = BarrierProfile::from_values(table.w[..=n].to_vec(), "W")?;
    let y = y0 as f64;
    Ok((
        law,
        BarrierEvent {
            start_y: y,
            end: EndInterval::unit_below(y),
            profile,
        },
    ))
}

/// `p_n`: start at `y0` above `W`, stay above it on `[0, n]` and end within
/// one unit below the starting height.
pub fn estimate_p_n(table: &CenteringTable<f64>, y0: i64, n: usize, reps: usize, seed: u64) -> Result<ProbEstimate> {
    let (law, event) = p_n_event(table, y0, n)?;
    estimate_barrier_prob_gauss(&law, &event, reps, seed)
}

/// `p̂_n` with replicates grown until the relative standard error is at most
/// `target_rel_se` or `max_reps` is reached. Check `rel_se()` on the result.
pub fn estimate_p_n_adaptive(
    table: &CenteringTable<f64>,
    y0: i64,
    n: usize,
    target_rel_se: f64,
    min_reps: usize,
    max_reps: usize,
    seed: u64,
) -> Result<ProbEstimate> {
    let mut reps = min_reps.max(1);
    loop {
        let est = estimate_p_n(table, y0, n, reps, seed)?;
        if est.p_hat == 0.0 && reps >= max_reps {
            return Err(Error::ZeroProbability { n });
        }
        if est.rel_se() <= target_rel_se || reps >= max_reps {
            return Ok(est);
        }
        let need = if est.p_hat > 0.0 {
            est.required_reps(target_rel_se).saturating_mul(11) / 10
        } else {
            reps * 4
        };
        reps = need.max(reps * 2).min(max_reps);
    }
}

/// `p̂_k` for every `k ≤ n` from one set of paths. Entry `n` equals
/// [`estimate_p_n`] at the same seed.
pub fn estimate_p_curve(table: &CenteringTable<f64>, y0: i64, n: usize, reps: usize, seed: u64) -> Result<Vec<ProbEstimate>> {
    let (law, event) = p_n_event(table, y0, n)?;
    check_event(&law, &event, reps)?;
    let seg = Segments::new(&law, &event.profile);
    let d0 = event.start_y - event.profile.values[0];
    let (lo, hi) = (event.end.lo, event.end.hi);
    let sums: Vec<(Vec<f64>, Vec<f64>)> = batches(reps)
        .map(|(b, size)| {
            let mut r = rng::stream(seed, b as u64);
            let mut s = vec![0.0; n + 1];
            let mut ss = vec![0.0; n + 1];
            for _ in 0..size {
                let mut w = 1.0;
                let mut d = d0;
                for k in 1..=n {
                    let c = w * final_segment(d, seg.drift[k], seg.var[k], lo, hi);
                    s[k] += c;
                    ss[k] += c * c;
                    if k == n {
                        break;
                    }
                    let z: f64 = r.sample(StandardNormal);
                    let next = d + seg.drift[k] + seg.sd[k] * z;
                    w *= bridge_survival(d, next, seg.var[k]);
                    d = next;
                    if w == 0.0 {
                        break;
                    }
                }
            }
            (s, ss)
        })
        .collect();
    let mut out = Vec::with_capacity(n + 1);
    out.push(ProbEstimate {
        p_hat: if event.end.contains(d0) { 1.0 } else { 0.0 },
        se: 0.0,
        reps,
        seed,
    });
    for k in 1..=n {
        let (s, ss) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0[k], a.1 + b.1[k]));
        out.push(ProbEstimate::from_sums(s, ss, reps, seed));
    }
    Ok(out)
}

fn banana<T: Scalar>(n: usize, delta: T, xi2: &[T], sign: T, label: &str) -> Result<BarrierProfile<T>> {
    if n < 3 {
        return Err(Error::param(format!("banana profile needs n ≥ 3, got {n}")));
    }
    if !(delta >= T::zero() && delta.is_finite()) {
        return Err(Error::param("banana delta must be finite and ≥ 0"));
    }
    if xi2.len() < n + 1 {
        return Err(Error::param(format!("banana needs xi2[1..={n}]")));
    }
    let sixth = T::lit(1.0 / 6.0);
    let g = |k: usize| {
        let a = T::from_usize_lossy(1 + k).powf(sixth);
        let b = T::from_usize_lossy(1 + n - k).powf(sixth);
        sign * delta * (a.min(b) - T::one())
    };
    let t = n / 3;
    let mut h = vec![T::zero(); n + 1];
    for k in 0..t {
        h[k + 1] = h[k] + xi2[k + 1] * (g(k + 1) - g(k));
    }
    for k in (n - t + 1..=n).rev() {
        h[k - 1] = h[k] - xi2[k] * (g(k) - g(k - 1));
    }
    let span = (t + 1..=n - t).fold(T::zero(), |a, j| a + xi2[j]);
    let (left, right) = (h[t], h[n - t]);
    let mut acc = T::zero();
    for k in t + 1..n - t {
        acc = acc + xi2[k];
        h[k] = left + (right - left) * (acc / span);
    }
    let mut p = BarrierProfile::from_values(h, label)?;
    p.interp = Interp::VarianceAdapted;
    Ok(p)
}

/// Concave 1/6-power profile with variance-scaled increments, zero at both
/// ends and nonpositive in between.
pub fn banana_up<T: Scalar>(n: usize, delta: T, xi2: &[T]) -> Result<BarrierProfile<T>> {
    banana(n, delta, xi2, -T::one(), "banana_up")
}

/// Mirror of [`banana_up`]: nonnegative in between.
pub fn banana_down<T: Scalar>(n: usize, delta: T, xi2: &[T]) -> Result<BarrierProfile<T>> {
    banana(n, delta, xi2, T::one(), "banana_down")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BananaKind {
    Up,
    Down,
}

impl BananaKind {
    pub fn build<T: Scalar>(self, n: usize, delta: T, xi2: &[T]) -> Result<BarrierProfile<T>> {
        match self {
            BananaKind::Up => banana_up(n, delta, xi2),
            BananaKind::Down => banana_down(n, delta, xi2),
        }
    }
}

fn check_ln_p<T: Scalar>(p_hat_n: T) -> Result<T> {
    if !(p_hat_n > T::zero() && p_hat_n <= T::one()) {
        return Err(Error::param(format!("p_hat_n = {p_hat_n} must lie in (0, 1]")));
    }
    Ok(p_hat_n.ln())
}

/// `m_{n,h}(k) = h(k) − σ_k²/(ϑ* σ_n²) · ln p_n`.
pub fn m_nh<T: Scalar>(
    table: &CenteringTable<T>,
    n: usize,
    p_hat_n: T,
    theta_star: T,
    banana: Option<&BarrierProfile<T>>,
) -> Result<BarrierProfile<T>> {
    let ln_p = check_ln_p(p_hat_n)?;
    if n > table.n || n == 0 {
        return Err(Error::param(format!("level {n} outside table 1..={}", table.n)));
    }
    if let Some(b) = banana {
        if b.n() != n {
            return Err(Error::param("banana length does not match n"));
        }
    }
    let sn = table.sigma2[n];
    let values = (0..=n)
        .map(|k| {
            let h = banana.map_or(T::zero(), |b| b.values[k]);
            h - table.sigma2[k] / (theta_star * sn) * ln_p
        })
        .collect();
    BarrierProfile::from_values(values, banana.map_or("m_n".to_string(), |b| format!("m_n+{}", b.label)))
}

/// `t_{n;y}^x(k) = K_k/ϑ* + x − y + m_{n,h}(k)`.
pub fn profile_t_ny<T: Scalar>(
    table: &CenteringTable<T>,
    n: usize,
    p_hat_n: T,
    theta_star: T,
    y: T,
    x: T,
    banana: Option<&BarrierProfile<T>>,
) -> Result<BarrierProfile<T>> {
    let m = m_nh(table, n, p_hat_n, theta_star, banana)?;
    let values = (0..=n)
        .map(|k| table.k[k] / theta_star + x - y + m.values[k])
        .collect();
    BarrierProfile::from_values(values, format!("t_ny[{}]", m.label))
}

/// Banana of the given kind with δ starting at 0.1 and halved until
/// `t_{n;y}` is nondecreasing. Returns `(δ, banana)`; δ may end at 0.
pub fn choose_delta(
    table: &CenteringTable<f64>,
    n: usize,
    p_hat_n: f64,
    theta_star: f64,
    kind: BananaKind,
) -> Result<(f64, BarrierProfile<f64>)> {
    let mut delta = 0.1;
    for _ in 0..40 {
        let b = kind.build(n, delta, &table.xi2)?;
        if profile_t_ny(table, n, p_hat_n, theta_star, 0.0, 0.0, Some(&b))?.is_nondecreasing() {
            return Ok((delta, b));
        }
        delta *= 0.5;
    }
    Ok((0.0, kind.build(n, 0.0, &table.xi2)?))
}

/// Centering `m_k = (K_k − ln p̂_k)/ϑ*` for `k = 0..=n` and its inverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centering {
    pub m: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub p_se: Vec<f64>,
    pub theta_star: f64,
    pub jensen: bool,
}

impl Centering {
    pub fn n(&self) -> usize {
        self.m.len() - 1
    }

    /// `m̃_t = max{k : m_k < t}`, i.e. `k` for `t ∈ (m_k, m_{k+1}]`.
    /// `None` if `t ≤ m_0` or `t > m_n` (beyond the table).
    pub fn m_tilde(&self, t: f64) -> Option<usize> {
        if !(t > self.m[0]) || t > self.m[self.n()] {
            return None;
        }
        Some(self.m.partition_point(|m| *m < t) - 1)
    }
}

/// Assembles `m_k` from the table and `p̂_k`. Fails if the sequence is not
/// strictly increasing.
pub fn assemble_centering(
    table: &CenteringTable<f64>,
    p_hat: &[ProbEstimate],
    theta_star: f64,
    jensen: bool,
) -> Result<Centering> {
    if p_hat.len() > table.n + 1 || p_hat.is_empty() {
        return Err(Error::param("p_hat must cover levels 0..=n within the table"));
    }
    let mut m = Vec::with_capacity(p_hat.len());
    for (k, est) in p_hat.iter().enumerate() {
        if !(est.p_hat > 0.0) {
            return Err(Error::ZeroProbability { n: k });
        }
        let v = (table.k[k] - est.ln_p(jensen && est.se > 0.0)) / theta_star;
        if let Some(&prev) = m.last() {
            if v <= prev {
                return Err(Error::NonMonotoneCentering { k, prev, next: v });
            }
        }
        m.push(v);
    }
    Ok(Centering {
        m,
        p_hat: p_hat.iter().map(|e| e.p_hat).collect(),
        p_se: p_hat.iter().map(|e| e.se).collect(),
        theta_star,
        jensen,
    })
}

/// `m_n` alone.
pub fn m_n(table: &CenteringTable<f64>, n: usize, p_hat_n: &ProbEstimate, theta_star: f64, jensen: bool) -> Result<f64> {
    if !(p_hat_n.p_hat > 0.0) {
        return Err(Error::ZeroProbability { n });
    }
    Ok((table.k[n] - p_hat_n.ln_p(jensen)) / theta_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn absent_barrier_is_certain() {
        let law = GaussLaw::homogeneous(10, 1.0).unwrap();
        let ev = BarrierEvent {
            start_y: 0.0,
            end: EndInterval::all(),
            profile: BarrierProfile::constant(10, -1e9, "absent"),
        };
        let p = estimate_barrier_prob_gauss(&law, &ev, 1000, 1).unwrap();
        assert_eq!(p.p_hat, 1.0);
        assert_eq!(p.se, 0.0);
    }

    #[test]
    fn pinned_single_segment() {
        let law = GaussLaw::homogeneous(1, 1.0).unwrap();
        let ev = BarrierEvent {
            start_y: 1.0,
            end: EndInterval::point(1.0),
            profile: BarrierProfile::zero(1),
        };
        let p = estimate_barrier_prob_gauss(&law, &ev, 10, 1).unwrap();
        assert_abs_diff_eq!(p.p_hat, 1.0 - (-2.0f64).exp(), epsilon = 1e-14);
    }

    #[test]
    fn final_segment_matches_free_reflection() {
        // Flat barrier, J = [0, ∞): P(min > 0) = 1 − 2 Q(d0/s) = erf(d0/(s√2)).
        let p = final_segment(1.3, 0.0, 2.0, f64::NEG_INFINITY, f64::INFINITY);
        assert_abs_diff_eq!(p, libm::erf(1.3 / 2.0), epsilon = 1e-14);
        assert_eq!(final_segment(0.0, 0.0, 1.0, 0.0, 1.0), 0.0);
        assert_eq!(final_segment(1.0, 0.0, 1.0, -2.0, -1.0), 0.0);
    }

    #[test]
    fn enlarging_end_interval_is_monotone_under_common_seed() {
        let law = GaussLaw::homogeneous(12, 0.7).unwrap();
        let profile = BarrierProfile::from_values((0..=12).map(|k| 0.1 * k as f64).collect(), "ramp").unwrap();
        let mut last = 0.0;
        for width in [0.5, 1.0, 2.0, 4.0] {
            let ev = BarrierEvent {
                start_y: 2.0,
                end: EndInterval::new(2.0 - width, 2.0).unwrap(),
                profile: profile.clone(),
            };
            let p = estimate_barrier_prob_gauss(&law, &ev, 5000, 9).unwrap().p_hat;
            assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn banana_hand_value_and_endpoints() {
        let xi2 = vec![1.0; 10];
        let up = banana_up(9, 0.3, &xi2).unwrap();
        assert_abs_diff_eq!(up.values[1], -0.3 * (2f64.powf(1.0 / 6.0) - 1.0), epsilon = 1e-15);
        assert_eq!(up.values[0], 0.0);
        assert_eq!(up.values[9], 0.0);
        let down = banana_down(9, 0.3, &xi2).unwrap();
        for k in 0..=9 {
            assert_eq!(down.values[k], -up.values[k]);
        }
        assert!(banana_up(9, 0.0, &xi2).unwrap().values.iter().all(|v| *v == 0.0));
        assert!(banana_up(2, 0.1, &xi2).is_err());
    }

    #[test]
    fn adapted_interpolation_endpoints_and_unit_segments() {
        let xi2 = [0.0, 0.5, 2.0, 1.0, 3.0];
        assert_eq!(adapted_interpolation(0, 4, 1.5, -2.0, &xi2, 0.0), 1.5);
        assert_eq!(adapted_interpolation(0, 4, 1.5, -2.0, &xi2, 4.0), -2.0);
        // Weight of x2 at s = 2 is (0.5 + 2)/6.5.
        let v = adapted_interpolation(0, 4, 0.0, 1.0, &xi2, 2.0);
        assert_abs_diff_eq!(v, 2.5 / 6.5, epsilon = 1e-15);
        // On a unit segment it is the chord.
        let v = adapted_interpolation(2, 3, 1.0, 3.0, &xi2, 2.25);
        assert_abs_diff_eq!(v, 1.5, epsilon = 1e-15);
    }

    #[test]
    fn from_knots_checks_xi2() {
        let knots = [(0, 0.0), (4, 1.0)];
        assert!(BarrierProfile::from_knots(&knots, Interp::VarianceAdapted, Some(&[1.0; 3]), "k").is_err());
        let p = BarrierProfile::from_knots(&knots, Interp::Linear, None, "k").unwrap();
        assert_eq!(p.values, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let xi2 = [0.0, 1.0, 1.0, 1.0, 1.0];
        let q = BarrierProfile::from_knots(&knots, Interp::VarianceAdapted, Some(&xi2), "k").unwrap();
        let law = GaussLaw::new(vec![0.0, 1.0, 2.0, 1.0, 1.0]).unwrap();
        let ev = BarrierEvent {
            start_y: 1.0,
            end: EndInterval::all(),
            profile: q,
        };
        assert!(estimate_barrier_prob_gauss(&law, &ev, 10, 0).is_err());
    }

    #[test]
    fn m_tilde_inverts_m() {
        let c = Centering {
            m: vec![0.0, 1.0, 2.5, 3.0],
            p_hat: vec![1.0; 4],
            p_se: vec![0.0; 4],
            theta_star: 1.0,
            jensen: false,
        };
        assert_eq!(c.m_tilde(1.0 + 1e-9), Some(1));
        assert_eq!(c.m_tilde(1.0), Some(0));
        assert_eq!(c.m_tilde(2.5), Some(1));
        assert_eq!(c.m_tilde(3.0), Some(2));
        assert_eq!(c.m_tilde(0.0), None);
        assert_eq!(c.m_tilde(3.1), None);
    }

    #[test]
    fn norm_interval_tails() {
        assert_abs_diff_eq!(norm_interval(-1.0, 1.0), 0.682_689_492_137_085_9, epsilon = 1e-15);
        assert!(norm_interval(30.0, 31.0) > 0.0);
        assert_eq!(norm_interval(1.0, 1.0), 0.0);
    }
}
