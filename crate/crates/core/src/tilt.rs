//! Tilted hitting-time quantities.
//!
//! For a walk started at `k − 1`, the weight `φ_k = E[exp(∫₀^{H_k} V(X_s) ds)]`
//! with potential `V(x) = ζ(x) + η` satisfies the first-step recursion
//!
//! ```text
//! φ_k = (1/2) / (1 − V(k−1) − φ_{k−1}/2)
//! ```
//!
//! which is a continued fraction running to −∞. It is truncated at `−M` and
//! seeded twice, with the homogeneous fixed points for the smallest and the
//! largest admissible potential. The map is increasing in both the seed and
//! the potential, so the two runs bracket the true value and contract at
//! rate `φ²` per site.
//!
//! `L_k(η) = ln φ_k` is the log moment generating function of the level-`k`
//! hitting increment. Its η-derivatives are the mean and the variance of that
//! increment under the tilted law; both are propagated through the
//! recursion alongside the values.

use serde::{Deserialize, Serialize};

use crate::env::{EnvDistribution, Environment};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Default certified bracket width for φ.
pub const DEFAULT_BRACKET_TOL: f64 = 1e-10;

/// Homogeneous fixed point of the recursion for constant potential `v ≤ 0`.
pub fn homogeneous_phi<T: Scalar>(v: T) -> T {
    let a = T::one() - v;
    (a + (a * a - T::one()).sqrt()).recip()
}

/// η-derivatives `(φ', φ'')` of [`homogeneous_phi`]; requires `v < 0`.
fn homogeneous_phi_derivatives<T: Scalar>(v: T) -> (T, T) {
    let a = T::one() - v;
    let s2 = a * a - T::one();
    let s = s2.sqrt();
    (homogeneous_phi(v) / s, (s2 * s).recip())
}

#[inline]
fn step<T: Scalar>(v: T, prev: T) -> Option<T> {
    let half = T::lit(0.5);
    let d = T::one() - v - half * prev;
    (d > T::zero()).then(|| half / d)
}

/// Bracketed values of φ on the sites `[−M, n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiProfile<T> {
    pub eta: T,
    pub x_lo: i64,
    pub x_hi: i64,
    pub phi_lo: Vec<T>,
    pub phi_hi: Vec<T>,
    pub trunc_depth: usize,
    /// Largest `phi_hi − phi_lo` over levels `1..=n`.
    pub bracket_width: T,
}

impl<T: Scalar> PhiProfile<T> {
    #[inline]
    fn idx(&self, x: i64) -> usize {
        debug_assert!(x >= self.x_lo && x <= self.x_hi, "site {x} outside profile");
        (x - self.x_lo) as usize
    }

    pub fn n(&self) -> usize {
        self.x_hi as usize
    }

    pub fn contains(&self, x: i64) -> bool {
        (self.x_lo..=self.x_hi).contains(&x)
    }

    /// Canonical φ_x: the upper-seeded run. Using a single run keeps the
    /// h-transform rates exactly consistent with the recursion.
    #[inline]
    pub fn phi(&self, x: i64) -> T {
        self.phi_hi[self.idx(x)]
    }

    pub fn bracket(&self, x: i64) -> (T, T) {
        let i = self.idx(x);
        (self.phi_lo[i], self.phi_hi[i])
    }

    /// L_k^ζ(η) = ln φ_k.
    pub fn log_phi(&self, k: i64) -> T {
        self.phi(k).ln()
    }
}

fn check_eta<T: Scalar>(eta: T) -> Result<()> {
    if !eta.is_finite() || eta > T::zero() {
        return Err(Error::InadmissibleTilt {
            eta: eta.to_f64_lossy(),
            reason: "η must be finite and ≤ 0".into(),
        });
    }
    Ok(())
}

fn potential<T: Scalar>(env: &Environment, eta: T, x: i64) -> T {
    T::lit(env.zeta(x)) + eta
}

fn run_values<T: Scalar>(env: &Environment, eta: T, lo: i64, hi: i64, seed: T) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity((hi - lo + 1) as usize);
    out.push(seed);
    for x in lo + 1..=hi {
        let prev = *out.last().unwrap();
        let next = step(potential(env, eta, x - 1), prev).ok_or_else(|| Error::InadmissibleTilt {
            eta: eta.to_f64_lossy(),
            reason: format!("nonpositive denominator at site {}", x - 1),
        })?;
        out.push(next);
    }
    Ok(out)
}

/// φ_x for `x ∈ [−depth, n]` with certified brackets.
///
/// Fails with [`Error::TruncationDepth`] if any level `1..=n` has a bracket
/// wider than `tol`.
pub fn phi_profile<T: Scalar>(
    env: &Environment,
    eta: T,
    n: usize,
    depth: usize,
    tol: T,
) -> Result<PhiProfile<T>> {
    check_eta(eta)?;
    if n == 0 || depth == 0 {
        return Err(Error::param("phi_profile needs n ≥ 1 and depth ≥ 1"));
    }
    let (lo, hi) = (-(depth as i64), n as i64);
    env.require(lo, hi)?;
    let v_max = eta;
    let v_min = eta + T::lit(env.ei() - env.es());
    let phi_lo = run_values(env, eta, lo, hi, homogeneous_phi(v_min))?;
    let phi_hi = run_values(env, eta, lo, hi, homogeneous_phi(v_max))?;
    let offset = depth;
    let width = (1..=n)
        .map(|k| phi_hi[offset + k] - phi_lo[offset + k])
        .fold(T::zero(), T::max);
    debug_assert!(phi_lo
        .iter()
        .zip(&phi_hi)
        .all(|(a, b)| *a > T::zero() && *a <= *b && *b <= T::one()));
    if width > tol {
        return Err(Error::TruncationDepth {
            depth,
            width: width.to_f64_lossy(),
            tol: tol.to_f64_lossy(),
        });
    }
    Ok(PhiProfile {
        eta,
        x_lo: lo,
        x_hi: hi,
        phi_lo,
        phi_hi,
        trunc_depth: depth,
        bracket_width: width,
    })
}

/// Like [`phi_profile`] but doubles the depth, starting from 16, until the
/// bracket meets `tol` or the environment window is exhausted.
pub fn phi_profile_auto<T: Scalar>(env: &Environment, eta: T, n: usize, tol: T) -> Result<PhiProfile<T>> {
    let max_depth = (-env.x_min()).max(1) as usize;
    let mut depth = 16.min(max_depth);
    loop {
        match phi_profile(env, eta, n, depth, tol) {
            Err(Error::TruncationDepth { .. }) if depth < max_depth => depth = (2 * depth).min(max_depth),
            other => return other,
        }
    }
}

/// Profile together with `(L_k)'` and `(L_k)''` for levels `1..=n`
/// (index `k`; entry 0 is zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiDerivatives<T> {
    pub profile: PhiProfile<T>,
    pub log_phi: Vec<T>,
    pub dlog: Vec<T>,
    pub d2log: Vec<T>,
}

struct DerivRun<T> {
    phi: Vec<T>,
    d1: Vec<T>,
    d2: Vec<T>,
}

fn run_with_derivatives<T: Scalar>(env: &Environment, eta: T, lo: i64, hi: i64, v_seed: T) -> Result<DerivRun<T>> {
    let two = T::lit(2.0);
    let len = (hi - lo + 1) as usize;
    let (mut phi, mut d1, mut d2) = (Vec::with_capacity(len), Vec::with_capacity(len), Vec::with_capacity(len));
    let (s1, s2) = homogeneous_phi_derivatives(v_seed);
    phi.push(homogeneous_phi(v_seed));
    d1.push(s1);
    d2.push(s2);
    for x in lo + 1..=hi {
        let (p, p1, p2) = (*phi.last().unwrap(), *d1.last().unwrap(), *d2.last().unwrap());
        let f = step(potential(env, eta, x - 1), p).ok_or_else(|| Error::InadmissibleTilt {
            eta: eta.to_f64_lossy(),
            reason: format!("nonpositive denominator at site {}", x - 1),
        })?;
        let g = two + p1;
        let f1 = f * f * g;
        let f2 = two * f * f1 * g + f * f * p2;
        phi.push(f);
        d1.push(f1);
        d2.push(f2);
    }
    Ok(DerivRun { phi, d1, d2 })
}

/// Forward-mode η-derivatives of `L_k = ln φ_k`.
///
/// η = 0 is rejected: without killing the walk is recurrent and the mean
/// hitting time diverges.
pub fn phi_derivatives<T: Scalar>(
    env: &Environment,
    eta: T,
    n: usize,
    depth: usize,
    tol: T,
) -> Result<PhiDerivatives<T>> {
    check_eta(eta)?;
    if eta == T::zero() {
        return Err(Error::InadmissibleTilt {
            eta: 0.0,
            reason: "derivatives diverge at η = 0 (recurrent walk, infinite mean hitting time)".into(),
        });
    }
    let profile = phi_profile(env, eta, n, depth, tol)?;
    let (lo, hi) = (profile.x_lo, profile.x_hi);
    let upper = run_with_derivatives(env, eta, lo, hi, eta)?;
    let lower = run_with_derivatives(env, eta, lo, hi, eta + T::lit(env.ei() - env.es()))?;
    let mut log_phi = vec![T::zero(); n + 1];
    let mut dlog = vec![T::zero(); n + 1];
    let mut d2log = vec![T::zero(); n + 1];
    let deriv_tol = tol.sqrt();
    for k in 1..=n {
        let i = depth + k;
        let moments = |r: &DerivRun<T>| {
            let m = r.d1[i] / r.phi[i];
            (m, r.d2[i] / r.phi[i] - m * m)
        };
        let (m_hi, v_hi) = moments(&upper);
        let (m_lo, v_lo) = moments(&lower);
        let rel = |a: T, b: T| (a - b).abs() / (T::one() + a.abs());
        if rel(m_hi, m_lo) > deriv_tol || rel(v_hi, v_lo) > deriv_tol {
            return Err(Error::TruncationDepth {
                depth,
                width: rel(m_hi, m_lo).max(rel(v_hi, v_lo)).to_f64_lossy(),
                tol: deriv_tol.to_f64_lossy(),
            });
        }
        log_phi[k] = upper.phi[i].ln();
        dlog[k] = m_hi;
        d2log[k] = v_hi;
    }
    Ok(PhiDerivatives {
        profile,
        log_phi,
        dlog,
        d2log,
    })
}

/// Jump rates `(right, left)` of the tilted walk at site `x`: the Doob
/// transform with harmonic weight `h(x) = Π_{j>x} φ_j`.
pub fn h_transform_rates<T: Scalar>(phi: &PhiProfile<T>, x: i64) -> Result<(T, T)> {
    if x < phi.x_lo || x >= phi.x_hi {
        return Err(Error::Internal(format!(
            "site {x} outside h-transform window [{}, {})",
            phi.x_lo, phi.x_hi
        )));
    }
    let (here, next) = (phi.phi(x), phi.phi(x + 1));
    let valid = |p: T| p > T::zero() && p <= T::one();
    if !valid(here) || !valid(next) {
        return Err(Error::Internal(format!("φ out of (0, 1] near site {x}")));
    }
    let half = T::lit(0.5);
    Ok((half / next, half * here))
}

/// Options for the annealed tilt solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltOptions {
    /// Left truncation depth M of every sampled environment.
    pub depth: usize,
    pub env_samples: usize,
    /// Residual target for the tilt equation.
    pub tol: f64,
    /// Largest accepted Monte Carlo standard error of η̄.
    pub noise_tol: f64,
    pub bracket_tol: f64,
    pub seed: u64,
}

impl Default for TiltOptions {
    fn default() -> Self {
        TiltOptions {
            depth: 64,
            env_samples: 100_000,
            tol: 1e-10,
            noise_tol: 1e-4,
            bracket_tol: DEFAULT_BRACKET_TOL,
            seed: 0x7117,
        }
    }
}

/// Annealed log-MGF `L(η) = E[L_1^ζ(η)]` and its derivatives at one η.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealedPoint {
    pub eta: f64,
    pub l: f64,
    pub l_se: f64,
    pub dl: f64,
    pub d2l: f64,
    /// Tilt equation `−L(η) − (es − η) L'(η)` and its standard error.
    pub g: f64,
    pub g_se: f64,
}

/// Fixed sample of environments left of the origin, reused for every η so the
/// estimated curve is smooth in η.
pub struct AnnealedSampler {
    depth: usize,
    samples: usize,
    ei: f64,
    es: f64,
    /// `samples × depth` potentials ζ at sites `−depth..−1`.
    left: Vec<f64>,
    site0: Site0,
    bracket_tol: f64,
}

enum Site0 {
    /// Exact average over the atoms `(ζ, weight)`.
    Atoms(Vec<(f64, f64)>),
    Sampled(Vec<f64>),
}

struct SampleMoments {
    l: f64,
    dl: f64,
    d2l: f64,
}

impl AnnealedSampler {
    pub fn new(dist: &EnvDistribution, depth: usize, samples: usize, seed: u64, bracket_tol: f64) -> Result<Self> {
        use rand::Rng;
        dist.validate()?;
        if depth == 0 || samples == 0 {
            return Err(Error::param("annealed sampler needs depth ≥ 1 and samples ≥ 1"));
        }
        let (ei, es) = dist.support();
        let mut left = Vec::with_capacity(samples * depth);
        let mut at0 = Vec::with_capacity(samples);
        for i in 0..samples {
            let mut r = rng::stream(seed, i as u64);
            for _ in 0..depth {
                left.push(dist.quantile_map(r.random()) - es);
            }
            at0.push(dist.quantile_map(r.random()) - es);
        }
        let site0 = match dist.atoms() {
            Some(atoms) => Site0::Atoms(atoms.into_iter().map(|(v, w)| (v - es, w)).collect()),
            None => Site0::Sampled(at0),
        };
        Ok(AnnealedSampler {
            depth,
            samples,
            ei,
            es,
            left,
            site0,
            bracket_tol,
        })
    }

    pub fn es(&self) -> f64 {
        self.es
    }

    fn sample_moments(&self, i: usize, eta: f64) -> Result<SampleMoments> {
        let zetas = &self.left[i * self.depth..(i + 1) * self.depth];
        let two = 2.0;
        let run = |v_seed: f64| -> Result<(f64, f64, f64)> {
            let (mut p, (mut p1, mut p2)) = (homogeneous_phi(v_seed), homogeneous_phi_derivatives(v_seed));
            for z in zetas {
                let f = step(z + eta, p).ok_or_else(|| Error::InadmissibleTilt {
                    eta,
                    reason: "nonpositive denominator".into(),
                })?;
                let g = two + p1;
                let f1 = f * f * g;
                p2 = two * f * f1 * g + f * f * p2;
                p1 = f1;
                p = f;
            }
            Ok((p, p1, p2))
        };
        let (hp, hp1, hp2) = run(eta)?;
        let (lp, _, _) = run(eta + self.ei - self.es)?;
        if hp - lp > self.bracket_tol {
            return Err(Error::TruncationDepth {
                depth: self.depth,
                width: hp - lp,
                tol: self.bracket_tol,
            });
        }
        let at_site0 = |z: f64| -> Result<(f64, f64, f64)> {
            let f = step(z + eta, hp).ok_or_else(|| Error::InadmissibleTilt {
                eta,
                reason: "nonpositive denominator".into(),
            })?;
            let g = two + hp1;
            let f1 = f * f * g;
            let f2 = two * f * f1 * g + f * f * hp2;
            let m = f1 / f;
            Ok((f.ln(), m, f2 / f - m * m))
        };
        let mut acc = SampleMoments { l: 0.0, dl: 0.0, d2l: 0.0 };
        match &self.site0 {
            Site0::Atoms(atoms) => {
                for (z, w) in atoms {
                    let (l, dl, d2l) = at_site0(*z)?;
                    acc.l += w * l;
                    acc.dl += w * dl;
                    acc.d2l += w * d2l;
                }
            }
            Site0::Sampled(z0) => {
                let (l, dl, d2l) = at_site0(z0[i])?;
                acc = SampleMoments { l, dl, d2l };
            }
        }
        Ok(acc)
    }

    pub fn eval(&self, eta: f64) -> Result<AnnealedPoint> {
        if !(eta.is_finite() && eta < 0.0) {
            return Err(Error::InadmissibleTilt {
                eta,
                reason: "annealed curve is evaluated for η < 0".into(),
            });
        }
        let n = self.samples as f64;
        let theta = self.es - eta;
        let (mut sl, mut sll, mut sd, mut sdd, mut sg, mut sgg) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..self.samples {
            let m = self.sample_moments(i, eta)?;
            let g = -m.l - theta * m.dl;
            sl += m.l;
            sll += m.l * m.l;
            sd += m.dl;
            sdd += m.d2l;
            sg += g;
            sgg += g * g;
        }
        let se = |s: f64, ss: f64| {
            if self.samples < 2 {
                return 0.0;
            }
            let mean = s / n;
            ((ss / n - mean * mean).max(0.0) * n / (n - 1.0) / n).sqrt()
        };
        Ok(AnnealedPoint {
            eta,
            l: sl / n,
            l_se: se(sl, sll),
            dl: sd / n,
            d2l: sdd / n,
            g: sg / n,
            g_se: se(sg, sgg),
        })
    }
}

/// Monte Carlo estimate of `L(η)` and its standard error.
pub fn mean_log_mgf(dist: &EnvDistribution, eta: f64, depth: usize, env_samples: usize, seed: u64) -> Result<(f64, f64)> {
    let sampler = AnnealedSampler::new(dist, depth, env_samples, seed, DEFAULT_BRACKET_TOL)?;
    let p = sampler.eval(eta)?;
    Ok((p.l, p.l_se))
}

/// One sampled point of the annealed curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub eta: f64,
    pub l: f64,
    pub dl: f64,
}

/// Annealed tilt parameter, speed and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltSolution {
    pub dist: EnvDistribution,
    pub ei: f64,
    pub es: f64,
    pub eta_bar: f64,
    pub v0: f64,
    pub theta_star: f64,
    /// `L(η̄)`, `L'(η̄)`, `L''(η̄)`.
    pub l: f64,
    pub dl: f64,
    pub d2l: f64,
    /// `|−L(η̄) − ϑ* L'(η̄)|`.
    pub residual: f64,
    /// Standard error of η̄ from the environment sample.
    pub eta_se: f64,
    /// Maximiser of `η/v0 − L(η)` on the diagnostic grid.
    pub argmax_eta: f64,
    pub argmax_grid_step: f64,
    pub argmax_ok: bool,
    pub l_curve: Vec<CurvePoint>,
    pub options: TiltOptions,
}

/// Brent's method on a bracket with `f(a)` and `f(b)` of opposite sign.
fn brent<F: FnMut(f64) -> Result<f64>>(mut f: F, mut a: f64, mut b: f64, xtol: f64, ftol: f64) -> Result<(f64, f64)> {
    let (mut fa, mut fb) = (f(a)?, f(b)?);
    if fa * fb > 0.0 {
        return Err(Error::NoSignChange {
            lo: a,
            hi: b,
            hint: "root not bracketed".into(),
        });
    }
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut bisected = true;
    for _ in 0..200 {
        if fb.abs() <= ftol || (b - a).abs() <= xtol {
            break;
        }
        let mut s = if fa != fc && fb != fc {
            a * fb * fc / ((fa - fb) * (fa - fc)) + b * fa * fc / ((fb - fa) * (fb - fc)) + c * fa * fb / ((fc - fa) * (fc - fb))
        } else {
            b - fb * (b - a) / (fb - fa)
        };
        let lo = (3.0 * a + b) / 4.0;
        let outside = !((s > lo.min(b)) && (s < lo.max(b)));
        if outside
            || (bisected && (s - b).abs() >= (b - c).abs() / 2.0)
            || (!bisected && (s - b).abs() >= (c - d).abs() / 2.0)
            || (bisected && (b - c).abs() < xtol)
            || (!bisected && (c - d).abs() < xtol)
        {
            s = 0.5 * (a + b);
            bisected = true;
        } else {
            bisected = false;
        }
        let fs = f(s)?;
        d = c;
        c = b;
        fc = fb;
        if fa * fs < 0.0 {
            b = s;
            fb = fs;
        } else {
            a = s;
            fa = fs;
        }
        if fa.abs() < fb.abs() {
            std::mem::swap(&mut a, &mut b);
            std::mem::swap(&mut fa, &mut fb);
        }
    }
    Ok((b, fb))
}

/// Solves `−L(η) = (es − η) L'(η)` for η̄ < 0, then `v0 = 1/L'(η̄)` and
/// `ϑ* = es − η̄`.
///
/// The left-hand side is decreasing in η, so the root is unique when it
/// exists. A grid check confirms that η ↦ η/v0 − L(η) peaks at η̄.
pub fn solve_tilt(dist: &EnvDistribution, opts: &TiltOptions) -> Result<TiltSolution> {
    let sampler = AnnealedSampler::new(dist, opts.depth, opts.env_samples, opts.seed, opts.bracket_tol)?;
    let g = |eta: f64| sampler.eval(eta).map(|p| p.g);

    let mut hi = -0.05;
    loop {
        match g(hi) {
            Ok(v) if v < 0.0 => break,
            Ok(_) if hi > -1e-6 => {
                return Err(Error::NoSignChange {
                    lo: hi,
                    hi: 0.0,
                    hint: "tilt equation stays positive up to η = 0; the speed may not exceed the critical one".into(),
                })
            }
            Ok(_) => hi *= 0.5,
            Err(Error::TruncationDepth { .. }) => {
                return Err(Error::NoSignChange {
                    lo: hi,
                    hi: 0.0,
                    hint: format!("bracket search reached η = {hi} where depth {} is too shallow; increase it", opts.depth),
                })
            }
            Err(e) => return Err(e),
        }
    }
    let mut lo = -1.0;
    while g(lo)? < 0.0 {
        lo *= 2.0;
        if lo < -1e4 {
            return Err(Error::NoSignChange {
                lo,
                hi,
                hint: "tilt equation stays negative; widen the bracket".into(),
            });
        }
    }
    let (eta_bar, _) = brent(g, lo, hi, 1e-15, opts.tol * 1e-3)?;
    let at = sampler.eval(eta_bar)?;
    let theta_star = sampler.es() - eta_bar;
    let v0 = 1.0 / at.dl;
    let slope = theta_star * at.d2l;
    let eta_se = if slope > 0.0 { at.g_se / slope } else { f64::INFINITY };
    if eta_se > opts.noise_tol {
        return Err(Error::NoisyTilt {
            eta_se,
            tol: opts.noise_tol,
        });
    }

    let points = 81;
    let (g_lo, g_hi) = (2.0 * eta_bar, 0.5 * eta_bar);
    let step_eta = (g_hi - g_lo) / (points - 1) as f64;
    let mut l_curve = Vec::with_capacity(points);
    for i in 0..points {
        let eta = g_lo + step_eta * i as f64;
        let p = sampler.eval(eta)?;
        l_curve.push(CurvePoint { eta, l: p.l, dl: p.dl });
    }
    let objective = |c: &CurvePoint| c.eta / v0 - c.l;
    let best = l_curve
        .iter()
        .max_by(|a, b| objective(a).total_cmp(&objective(b)))
        .copied()
        .expect("non-empty grid");
    let argmax_ok = (best.eta - eta_bar).abs() <= step_eta;

    Ok(TiltSolution {
        dist: dist.clone(),
        ei: dist.support().0,
        es: sampler.es(),
        eta_bar,
        v0,
        theta_star,
        l: at.l,
        dl: at.dl,
        d2l: at.d2l,
        residual: at.g.abs(),
        eta_se,
        argmax_eta: best.eta,
        argmax_grid_step: step_eta,
        argmax_ok,
        l_curve,
        options: opts.clone(),
    })
}

/// Per-level centering arrays for one environment.
///
/// All arrays have length `n + 1` and are indexed by level; entry 0 of
/// `mean_tau` and `xi2` is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringTable<T> {
    pub n: usize,
    pub eta_bar: T,
    pub theta_star: T,
    pub env_seed: u64,
    /// K_k = −Σ_{j≤k} L_j(η̄).
    pub k: Vec<T>,
    /// W_k = K_k/ϑ* − Σ_{j≤k} (L_j)'(η̄).
    pub w: Vec<T>,
    /// ξ_k² = (L_k)''(η̄), the tilted variance of τ_k.
    pub xi2: Vec<T>,
    /// σ_k² = Σ_{j≤k} ξ_j².
    pub sigma2: Vec<T>,
    /// (L_k)'(η̄), the tilted mean of τ_k.
    pub mean_tau: Vec<T>,
    pub trunc_depth: usize,
}

impl<T: Scalar> CenteringTable<T> {
    /// K_k / ϑ*.
    pub fn k_scaled(&self, k: usize) -> T {
        self.k[k] / self.theta_star
    }
}

/// Builds `K`, `W`, `ξ²`, `σ²` on levels `0..=n` at η̄ from `tilt`.
pub fn centering_table<T: Scalar>(
    env: &Environment,
    tilt: &TiltSolution,
    n: usize,
    depth: usize,
    tol: T,
) -> Result<CenteringTable<T>> {
    let eta = T::lit(tilt.eta_bar);
    let theta = T::lit(tilt.theta_star);
    let d = phi_derivatives(env, eta, n, depth, tol)?;
    let upper_increment = -homogeneous_phi(eta + T::lit(env.ei() - env.es())).ln();
    let slack = T::lit(1e3) * T::epsilon() * (T::one() + upper_increment);
    let mut table = CenteringTable {
        n,
        eta_bar: eta,
        theta_star: theta,
        env_seed: env.seed(),
        k: vec![T::zero(); n + 1],
        w: vec![T::zero(); n + 1],
        xi2: vec![T::zero(); n + 1],
        sigma2: vec![T::zero(); n + 1],
        mean_tau: vec![T::zero(); n + 1],
        trunc_depth: depth,
    };
    let mut mean_sum = T::zero();
    for k in 1..=n {
        let inc = -d.log_phi[k];
        if !(inc > T::zero() && inc <= upper_increment + slack) {
            return Err(Error::Internal(format!(
                "K increment {inc} at level {k} outside (0, {upper_increment}]"
            )));
        }
        if !(d.d2log[k] > T::zero() && d.dlog[k] > T::zero()) {
            return Err(Error::Internal(format!("nonpositive tilted moment at level {k}")));
        }
        table.k[k] = table.k[k - 1] + inc;
        table.mean_tau[k] = d.dlog[k];
        table.xi2[k] = d.d2log[k];
        table.sigma2[k] = table.sigma2[k - 1] + d.d2log[k];
        mean_sum = mean_sum + d.dlog[k];
        table.w[k] = table.k[k] / theta - mean_sum;
    }
    Ok(table)
}

pub fn save_json<S: Serialize>(value: &S, path: &std::path::Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_json<D: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        context: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::sample_environment;
    use approx::assert_abs_diff_eq;

    fn flat(rate: f64) -> Environment {
        Environment::homogeneous(rate, -200, 200).unwrap()
    }

    fn closed_form_phi(eta: f64) -> f64 {
        let a = 1.0 - eta;
        a - (a * a - 1.0).sqrt()
    }

    #[test]
    fn unit_weight_without_tilt() {
        let p = phi_profile(&flat(0.2), 0.0, 10, 32, 1e-12).unwrap();
        for k in 1..=10 {
            assert_eq!(p.phi(k), 1.0);
            assert_eq!(p.log_phi(k), 0.0);
        }
    }

    #[test]
    fn homogeneous_fixed_point() {
        let p = phi_profile(&flat(0.2), -0.5, 5, 32, 1e-12).unwrap();
        for k in 1..=5 {
            assert_abs_diff_eq!(p.phi(k), 0.381_966_011_250_105_1, epsilon = 1e-12);
            assert_abs_diff_eq!(p.log_phi(k), -0.962_423_650_119_206_9, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(closed_form_phi(-0.5), 0.381_966_011_250_105_1, epsilon = 1e-15);
    }

    #[test]
    fn deeper_truncation_nests_brackets() {
        let dist = EnvDistribution::Uniform { lo: 0.1, hi: 0.5 };
        let env = sample_environment(&dist, -200, 20, 3).unwrap();
        let a = phi_profile(&env, -0.05, 10, 8, 1.0).unwrap();
        let b = phi_profile(&env, -0.05, 10, 16, 1.0).unwrap();
        assert!(b.bracket_width < a.bracket_width);
        for k in 1..=10 {
            let (alo, ahi) = a.bracket(k);
            let (blo, bhi) = b.bracket(k);
            assert!(alo <= blo && bhi <= ahi);
        }
    }

    #[test]
    fn shallow_depth_is_reported() {
        let env = sample_environment(&EnvDistribution::default(), -200, 20, 3).unwrap();
        match phi_profile(&env, -0.01, 10, 4, 1e-10) {
            Err(Error::TruncationDepth { depth: 4, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let auto = phi_profile_auto(&env, -0.01, 10, 1e-10).unwrap();
        assert!(auto.trunc_depth > 4 && auto.bracket_width <= 1e-10);
    }

    #[test]
    fn positive_eta_rejected() {
        assert!(matches!(
            phi_profile(&flat(0.2), 0.1, 3, 8, 1e-6),
            Err(Error::InadmissibleTilt { .. })
        ));
    }

    #[test]
    fn derivatives_reject_zero_eta() {
        let err = phi_derivatives(&flat(0.2), 0.0, 3, 32, 1e-10).unwrap_err();
        assert!(err.to_string().contains("η = 0"), "{err}");
    }

    #[test]
    fn homogeneous_mean_is_two_over_root_five() {
        let d = phi_derivatives(&flat(0.2), -0.5, 4, 64, 1e-12).unwrap();
        for k in 1..=4 {
            assert_abs_diff_eq!(d.dlog[k], 2.0 / 5f64.sqrt(), epsilon = 1e-12);
            assert!(d.d2log[k] > 0.0);
        }
    }

    #[test]
    fn f32_profile_agrees_with_f64() {
        let env = sample_environment(&EnvDistribution::default(), -64, 16, 1).unwrap();
        let p64 = phi_profile(&env, -0.3f64, 16, 48, 1e-10).unwrap();
        let p32 = phi_profile(&env, -0.3f32, 16, 48, 1e-5).unwrap();
        for k in 1..=16 {
            assert!((p64.phi(k) - f64::from(p32.phi(k))).abs() < 1e-5);
        }
    }

    #[test]
    fn total_rate_identity_and_right_bias() {
        let env = sample_environment(&EnvDistribution::Uniform { lo: 0.05, hi: 0.4 }, -80, 40, 8).unwrap();
        let p = phi_profile(&env, -0.2, 40, 64, 1e-10).unwrap();
        for x in -64..40 {
            let (r, l) = h_transform_rates(&p, x).unwrap();
            assert!((r + l - (1.0 - (env.zeta(x) - 0.2))).abs() < 1e-12);
            assert!(r > l);
        }
        assert!(h_transform_rates(&p, 40).is_err());
    }

    #[test]
    fn no_tilt_rates_are_symmetric() {
        let p = phi_profile(&flat(0.3), 0.0, 4, 8, 1e-12).unwrap();
        assert_eq!(h_transform_rates(&p, 1).unwrap(), (0.5, 0.5));
    }

    #[test]
    fn brent_finds_cubic_root() {
        let (x, fx) = brent(|x| Ok(x * x * x - 2.0), 0.0, 2.0, 1e-15, 1e-15).unwrap();
        assert_abs_diff_eq!(x, 2f64.cbrt(), epsilon = 1e-13);
        assert!(fx.abs() < 1e-13);
    }
}
