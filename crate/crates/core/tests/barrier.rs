mod common;

use std::sync::OnceLock;

use approx::assert_abs_diff_eq;
use brwre::barrier::{
    assemble_centering, banana_down, banana_up, choose_delta, estimate_barrier_prob_gauss, estimate_p_curve, estimate_p_n,
    estimate_p_n_adaptive, m_n, profile_t_ny, BananaKind, BarrierEvent, BarrierProfile, EndInterval, GaussLaw, ProbEstimate,
};
use brwre::env::{sample_environment, EnvDistribution};
use brwre::tilt::{centering_table, solve_tilt, CenteringTable, TiltOptions, TiltSolution};
use common::{grid_p_n, within};

fn tilt() -> &'static TiltSolution {
    static T: OnceLock<TiltSolution> = OnceLock::new();
    T.get_or_init(|| {
        let opts = TiltOptions {
            env_samples: 20_000,
            noise_tol: 1e-3,
            ..TiltOptions::default()
        };
        solve_tilt(&EnvDistribution::default(), &opts).unwrap()
    })
}

fn table(seed: u64, n: usize) -> CenteringTable<f64> {
    let env = sample_environment(&EnvDistribution::default(), -150, n as i64 + 4, seed).unwrap();
    centering_table(&env, tilt(), n, 64, 1e-10).unwrap()
}

#[test]
fn pinned_bridge_survival_by_weighted_sampling() {
    for parts in [2usize, 4] {
        let law = GaussLaw::homogeneous(parts, 1.0 / parts as f64).unwrap();
        let ev = BarrierEvent {
            start_y: 1.0,
            end: EndInterval::point(1.0),
            profile: BarrierProfile::zero(parts),
        };
        let p = estimate_barrier_prob_gauss(&law, &ev, 200_000, 7).unwrap();
        let exact = 1.0 - (-2.0f64).exp();
        assert!((p.p_hat - exact).abs() <= 3.0 * p.se, "{parts}: {} ± {}", p.p_hat, p.se);
    }
}

#[test]
fn bridge_estimator_matches_fine_grid() {
    for seed in 0..5u64 {
        let t = table(100 + seed, 32);
        let p = estimate_p_n(&t, 4, 32, 200_000, seed).unwrap();
        let (g, g_se) = grid_p_n(&t, 4.0, 32, 128, 100_000, 1000 + seed);
        assert!(within(p.p_hat, p.se, g, g_se, 3.0), "env {seed}: bridge {} ± {}, grid {g} ± {g_se}", p.p_hat, p.se);
    }
}

#[test]
fn p_n_edge_and_nesting() {
    let t = table(5, 64);
    assert_eq!(estimate_p_n(&t, 4, 0, 10, 0).unwrap().p_hat, 1.0);
    assert!(estimate_p_n(&t, 3, 8, 10, 0).is_err());
    let p: Vec<ProbEstimate> = [16usize, 32, 64].iter().map(|&n| estimate_p_n(&t, 4, n, 200_000, 1).unwrap()).collect();
    for w in p.windows(2) {
        assert!(w[1].p_hat < w[0].p_hat + 3.0 * w[0].se.hypot(w[1].se));
    }
}

#[test]
fn curve_agrees_with_single_level_estimates() {
    let t = table(9, 40);
    let curve = estimate_p_curve(&t, 4, 40, 5000, 3).unwrap();
    assert_eq!(curve.len(), 41);
    assert_eq!(curve[0].p_hat, 1.0);
    let single = estimate_p_n(&t, 4, 40, 5000, 3).unwrap();
    assert_abs_diff_eq!(curve[40].p_hat, single.p_hat, epsilon = 1e-12);
    let c = assemble_centering(&t, &curve, t.theta_star, false).unwrap();
    for k in 1..40 {
        assert_eq!(c.m_tilde(c.m[k] + 1e-9), Some(k));
    }
}

#[test]
fn adaptive_estimate_reaches_target() {
    let t = table(11, 64);
    let p = estimate_p_n_adaptive(&t, 4, 64, 0.05, 2000, 2_000_000, 4).unwrap();
    assert!(p.rel_se() <= 0.05);
}

#[test]
fn unit_probability_gives_scaled_k() {
    let t = table(2, 16);
    let one = ProbEstimate {
        p_hat: 1.0,
        se: 0.0,
        reps: 1,
        seed: 0,
    };
    assert_abs_diff_eq!(m_n(&t, 16, &one, t.theta_star, false).unwrap(), t.k[16] / t.theta_star, epsilon = 1e-12);
}

#[test]
fn t_profile_identities() {
    let t = table(4, 30);
    let p = 3e-3;
    let (x, y) = (1.5, 4.0);
    let prof = profile_t_ny(&t, 30, p, t.theta_star, y, x, None).unwrap();
    let m = m_n(&t, 30, &ProbEstimate { p_hat: p, se: 0.0, reps: 1, seed: 0 }, t.theta_star, false).unwrap();
    assert_abs_diff_eq!(prof.values[30], m + x - y, epsilon = 1e-9);
    let at_zero = profile_t_ny(&t, 30, p, t.theta_star, y, y, None).unwrap();
    assert_abs_diff_eq!(at_zero.values[0], 0.0, epsilon = 1e-12);
    for kind in [BananaKind::Up, BananaKind::Down] {
        let (delta, b) = choose_delta(&t, 30, p, t.theta_star, kind).unwrap();
        assert!(delta > 0.0);
        assert!(profile_t_ny(&t, 30, p, t.theta_star, 0.0, 0.0, Some(&b)).unwrap().is_nondecreasing());
    }
}

#[test]
fn banana_shapes() {
    let t = table(8, 60);
    let delta = 0.1;
    let up = banana_up(60, delta, &t.xi2).unwrap();
    let down = banana_down(60, delta, &t.xi2).unwrap();
    assert_eq!(up.values[0], 0.0);
    assert_eq!(up.values[60], 0.0);
    let max_xi2 = t.xi2[1..].iter().copied().fold(0.0, f64::max);
    for k in 0..60 {
        assert_abs_diff_eq!(up.values[k], -down.values[k], epsilon = 1e-15);
        assert!(up.values[k] <= 0.0);
        let step = (up.values[k + 1] - up.values[k]).abs();
        // The last third mirrors the first: measure from the nearer end.
        let j = k.min(59 - k) as f64;
        let bound = 2.0 * delta * ((j + 1.0).powf(1.0 / 6.0) - j.powf(1.0 / 6.0)) * max_xi2;
        assert!(step <= bound + 1e-12, "k = {k}: {step} > {bound}");
    }
    let zero = banana_up(60, 0.0, &t.xi2).unwrap();
    assert!(zero.values.iter().all(|v| *v == 0.0));
}

#[test]
fn centering_slope_approaches_inverse_speed() {
    let inv_v0 = 1.0 / tilt().v0;
    let mut closer = 0;
    for seed in 0..10u64 {
        let t = table(300 + seed, 256);
        let gap = |n: usize| {
            let p = estimate_p_n_adaptive(&t, 4, n, 0.05, 20_000, 4_000_000, seed).unwrap();
            (m_n(&t, n, &p, t.theta_star, false).unwrap() / n as f64 - inv_v0).abs()
        };
        if gap(256) < gap(64) {
            closer += 1;
        }
    }
    assert_eq!(closer, 10);
}
