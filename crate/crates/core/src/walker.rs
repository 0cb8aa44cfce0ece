//! Sampling the tilted single walk.
//!
//! Under the tilted law the walk targeting level `k` is a birth–death chain
//! with rates `1/(2φ_{x+1})` to the right and `φ_x/2` to the left; its total
//! rate is `1 − V(x)`. Hitting increments of successive levels are
//! independent, so a hitting path is a concatenation of per-level samples
//! that all share one φ profile.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::{BarrierEvent, ProbEstimate};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::rng::{self, SimRng};
use crate::tilt::{h_transform_rates, phi_profile, CenteringTable, PhiProfile};

/// Hitting times of levels `1..=n` (index `k`, entry 0 is zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingPath {
    pub h: Vec<f64>,
    pub tau: Vec<f64>,
}

impl HittingPath {
    pub fn n(&self) -> usize {
        self.h.len() - 1
    }
}

#[derive(Debug, Clone)]
struct RateTable {
    x_lo: i64,
    p_right: Vec<f64>,
    inv_total: Vec<f64>,
}

impl RateTable {
    fn new(phi: &PhiProfile<f64>) -> Result<Self> {
        let mut p_right = Vec::new();
        let mut inv_total = Vec::new();
        for x in phi.x_lo..phi.x_hi {
            let (r, l) = h_transform_rates(phi, x)?;
            p_right.push(r / (r + l));
            inv_total.push(1.0 / (r + l));
        }
        Ok(RateTable {
            x_lo: phi.x_lo,
            p_right,
            inv_total,
        })
    }
}

/// Tilted walk on a fixed environment at one η.
///
/// An excursion below the φ window is discarded and the increment is
/// resampled with a window of twice the depth; such truncations are counted.
pub struct TiltedWalker<'a> {
    env: &'a Environment,
    eta: f64,
    n: usize,
    tol: f64,
    rates: RateTable,
    truncations: AtomicU64,
}

impl<'a> TiltedWalker<'a> {
    pub fn new(env: &'a Environment, phi: &PhiProfile<f64>) -> Result<Self> {
        Ok(TiltedWalker {
            env,
            eta: phi.eta,
            n: phi.n(),
            tol: phi.bracket_width.max(crate::tilt::DEFAULT_BRACKET_TOL),
            rates: RateTable::new(phi)?,
            truncations: AtomicU64::new(0),
        })
    }

    /// Builds the φ profile for `eta` on levels `1..=n` at the given depth.
    pub fn with_eta(env: &'a Environment, eta: f64, n: usize, depth: usize, tol: f64) -> Result<Self> {
        let phi = phi_profile(env, eta, n, depth, tol)?;
        Self::new(env, &phi)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn truncations(&self) -> u64 {
        self.truncations.load(Ordering::Relaxed)
    }

    /// Runs one increment; `None` if the excursion leaves the window.
    fn run(rates: &RateTable, k: i64, rng: &mut SimRng) -> Option<f64> {
        let mut x = k - 1;
        let mut t = 0.0;
        loop {
            let i = (x - rates.x_lo) as usize;
            let e: f64 = rng.sample(Exp1);
            t += e * rates.inv_total[i];
            if rng.random::<f64>() < rates.p_right[i] {
                x += 1;
                if x == k {
                    return Some(t);
                }
            } else {
                x -= 1;
                if x < rates.x_lo {
                    return None;
                }
            }
        }
    }

    /// τ_k, the time to go from `k − 1` to `k`.
    pub fn sample_tau(&self, k: usize, rng: &mut SimRng) -> Result<f64> {
        if k == 0 || k > self.n {
            return Err(Error::param(format!("level {k} outside 1..={}", self.n)));
        }
        if let Some(t) = Self::run(&self.rates, k as i64, rng) {
            return Ok(t);
        }
        self.truncations.fetch_add(1, Ordering::Relaxed);
        let mut depth = (-self.rates.x_lo) as usize * 2;
        loop {
            let phi = phi_profile(self.env, self.eta, self.n, depth, self.tol)?;
            let rates = RateTable::new(&phi)?;
            if let Some(t) = Self::run(&rates, k as i64, rng) {
                return Ok(t);
            }
            self.truncations.fetch_add(1, Ordering::Relaxed);
            depth *= 2;
        }
    }

    pub fn sample_hitting_path(&self, n: usize, rng: &mut SimRng) -> Result<HittingPath> {
        if n > self.n {
            return Err(Error::param(format!("path to level {n} beyond profile {}", self.n)));
        }
        let mut h = vec![0.0; n + 1];
        let mut tau = vec![0.0; n + 1];
        for k in 1..=n {
            tau[k] = self.sample_tau(k, rng)?;
            h[k] = h[k - 1] + tau[k];
        }
        Ok(HittingPath { h, tau })
    }
}

/// Random-walk barrier event on levels `0..=n`:
/// `y + H_k − K_k/ϑ* − f(k) ≥ 0` for every `k` and `y + H_n − K_n/ϑ* − f(n) ∈ J`.
pub fn estimate_barrier_prob_rw(
    walker: &TiltedWalker<'_>,
    table: &CenteringTable<f64>,
    event: &BarrierEvent<f64>,
    reps: usize,
    seed: u64,
) -> Result<ProbEstimate> {
    if reps == 0 {
        return Err(Error::param("reps must be positive"));
    }
    let n = event.profile.n();
    if n > walker.n() || n > table.n {
        return Err(Error::param(format!("event on {n} levels exceeds walker or table")));
    }
    let shift: Vec<f64> = (0..=n)
        .map(|k| event.start_y - table.k[k] / table.theta_star - event.profile.values[k])
        .collect();
    const BATCH: usize = 1024;
    let batches = reps.div_ceil(BATCH);
    let counts: Vec<Result<u64>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, b as u64);
            let mut hits = 0u64;
            for _ in 0..BATCH.min(reps - b * BATCH) {
                if shift[0] < 0.0 {
                    continue;
                }
                let mut h = 0.0;
                let mut ok = true;
                for k in 1..=n {
                    h += walker.sample_tau(k, &mut r)?;
                    if h + shift[k] < 0.0 {
                        ok = false;
                        break;
                    }
                }
                if ok && event.end.contains(h + shift[n]) {
                    hits += 1;
                }
            }
            Ok(hits)
        })
        .collect();
    let mut hits = 0u64;
    for c in counts {
        hits += c?;
    }
    let p = hits as f64 / reps as f64;
    let se = if reps > 1 {
        (p * (1.0 - p) / (reps as f64 - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(ProbEstimate {
        p_hat: p,
        se,
        reps,
        seed,
    })
}

/// Direct Monte Carlo of `E_{k−1}[exp(∫₀^{H_k} V(X_s) ds)]` under the
/// untilted rate-one walk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiOracle {
    pub mean: f64,
    pub se: f64,
    pub reps: usize,
    /// Paths stopped by the step budget, the window edge or a negligible weight.
    pub truncated: u64,
    /// Upper bound on the downward bias from truncated paths: each one
    /// contributes its weight so far, the true value lies in `[0, weight]`.
    pub bias_bound: f64,
}

/// Untilted oracle for φ_k at small `k`, used by tests.
pub fn mc_phi_oracle(env: &Environment, eta: f64, k: usize, reps: usize, step_budget: usize, seed: u64) -> Result<PhiOracle> {
    if k == 0 || k > 3 {
        return Err(Error::param("the untilted oracle is meant for 1 ≤ k ≤ 3"));
    }
    if eta > 0.0 || !eta.is_finite() {
        return Err(Error::param("eta must be ≤ 0"));
    }
    if reps == 0 {
        return Err(Error::param("reps must be positive"));
    }
    let target = k as i64;
    env.require(target - 1, target)?;
    const BATCH: usize = 4096;
    let batches = reps.div_ceil(BATCH);
    // Paths whose log-weight drops below this are stopped; with V ≤ 0 it can only fall.
    const NEGLIGIBLE_LOG_WEIGHT: f64 = -60.0;
    let parts: Vec<(f64, f64, u64, f64)> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, b as u64);
            let (mut s, mut ss, mut trunc, mut bias) = (0.0, 0.0, 0u64, 0.0);
            for _ in 0..BATCH.min(reps - b * BATCH) {
                let mut x = target - 1;
                let mut integral = 0.0;
                let mut steps = 0usize;
                let w = loop {
                    if !env.contains(x) || steps >= step_budget || integral < NEGLIGIBLE_LOG_WEIGHT {
                        trunc += 1;
                        let w = integral.exp();
                        bias += w;
                        break w;
                    }
                    let hold: f64 = r.sample(Exp1);
                    integral += (env.zeta(x) + eta) * hold;
                    steps += 1;
                    if r.random::<bool>() {
                        x += 1;
                        if x == target {
                            break integral.exp();
                        }
                    } else {
                        x -= 1;
                    }
                };
                s += w;
                ss += w * w;
            }
            (s, ss, trunc, bias)
        })
        .collect();
    let (s, ss, trunc, bias) = parts
        .iter()
        .fold((0.0, 0.0, 0u64, 0.0), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2, a.3 + p.3));
    let n = reps as f64;
    let mean = s / n;
    let var = if reps > 1 {
        ((ss - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(PhiOracle {
        mean,
        se: (var / n).sqrt(),
        reps,
        truncated: trunc,
        bias_bound: bias / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{BarrierProfile, EndInterval};
    use crate::tilt::CenteringTable;

    fn flat_env() -> Environment {
        Environment::homogeneous(0.2, -100, 40).unwrap()
    }

    #[test]
    fn same_stream_same_draws() {
        let env = flat_env();
        let w = TiltedWalker::with_eta(&env, -0.5, 10, 64, 1e-10).unwrap();
        let a = w.sample_hitting_path(10, &mut rng::stream(3, 1)).unwrap();
        let b = w.sample_hitting_path(10, &mut rng::stream(3, 1)).unwrap();
        assert_eq!(a, b);
        assert!(a.h.windows(2).all(|p| p[1] > p[0]));
    }

    #[test]
    fn level_outside_profile_rejected() {
        let env = flat_env();
        let w = TiltedWalker::with_eta(&env, -0.5, 5, 64, 1e-10).unwrap();
        assert!(w.sample_tau(6, &mut rng::stream(0, 0)).is_err());
        assert!(w.sample_tau(0, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn shallow_window_counts_truncations() {
        let env = flat_env();
        // Depth 1 with a weak tilt forces frequent left exits.
        let phi = phi_profile(&env, -0.01, 3, 1, 1.0).unwrap();
        let w = TiltedWalker::new(&env, &phi).unwrap();
        let mut r = rng::stream(1, 0);
        for _ in 0..200 {
            w.sample_tau(1, &mut r).unwrap();
        }
        assert!(w.truncations() > 0);
    }

    #[test]
    fn absent_barrier_is_certain() {
        let env = flat_env();
        let w = TiltedWalker::with_eta(&env, -0.5, 8, 64, 1e-10).unwrap();
        let table = CenteringTable {
            n: 8,
            eta_bar: -0.5,
            theta_star: 0.7,
            env_seed: 0,
            k: (0..=8).map(|k| k as f64).collect(),
            w: vec![0.0; 9],
            xi2: vec![1.0; 9],
            sigma2: (0..=8).map(|k| k as f64).collect(),
            mean_tau: vec![1.0; 9],
            trunc_depth: 64,
        };
        let ev = BarrierEvent {
            start_y: 0.0,
            end: EndInterval::all(),
            profile: BarrierProfile::constant(8, -1e9, "absent"),
        };
        let p = estimate_barrier_prob_rw(&w, &table, &ev, 500, 4).unwrap();
        assert_eq!(p.p_hat, 1.0);
    }

    #[test]
    fn oracle_without_potential_is_one() {
        let env = Environment::homogeneous(0.2, -50, 10).unwrap();
        let o = mc_phi_oracle(&env, 0.0, 1, 200, 1000, 1).unwrap();
        assert_eq!(o.mean, 1.0);
        assert!(mc_phi_oracle(&env, -0.5, 4, 10, 10, 1).is_err());
    }
}
