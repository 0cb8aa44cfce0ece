mod common;

use approx::assert_abs_diff_eq;
use brwre::barrier::{BarrierEvent, BarrierProfile, EndInterval};
use brwre::env::{sample_environment, EnvDistribution, Environment};
use brwre::rng;
use brwre::tilt::{centering_table, phi_derivatives, phi_profile, CenteringTable, TiltOptions, TiltSolution};
use brwre::walker::{estimate_barrier_prob_rw, mc_phi_oracle, TiltedWalker};
use common::{closed_form_l, moments, phi_star};

fn flat() -> Environment {
    Environment::homogeneous(0.2, -200, 80).unwrap()
}

#[test]
fn homogeneous_tau_mean_and_laplace_transform() {
    let env = flat();
    let w = TiltedWalker::with_eta(&env, -0.5, 4, 64, 1e-12).unwrap();
    let mut r = rng::stream(1, 0);
    let draws: Vec<f64> = (0..200_000).map(|_| w.sample_tau(1, &mut r).unwrap()).collect();
    let (mean, se, var, var_se) = moments(&draws);
    let (_, dl, d2l) = closed_form_l(-0.5);
    assert!((mean - dl).abs() <= 3.0 * se);
    assert!((var - d2l).abs() <= 3.0 * var_se);
    for s in [0.1, 0.2] {
        let lt: Vec<f64> = draws.iter().map(|t| (-s * t).exp()).collect();
        let (m, m_se, _, _) = moments(&lt);
        let want = phi_star(-0.5 - s) / phi_star(-0.5);
        assert!((m - want).abs() <= 3.0 * m_se, "s = {s}: {m} vs {want}");
    }
}

#[test]
fn random_environment_tau_moments_and_independence() {
    let env = sample_environment(&EnvDistribution::default(), -300, 40, 21).unwrap();
    let eta = -0.1;
    let d = phi_derivatives(&env, eta, 30, 64, 1e-12).unwrap();
    let w = TiltedWalker::with_eta(&env, eta, 30, 64, 1e-12).unwrap();
    let mut r = rng::stream(2, 0);
    let reps = 100_000;
    let mut a = Vec::with_capacity(reps);
    let mut b = Vec::with_capacity(reps);
    let mut h30 = Vec::with_capacity(reps);
    for _ in 0..reps {
        let p = w.sample_hitting_path(30, &mut r).unwrap();
        assert!(p.h.windows(2).all(|x| x[1] > x[0]));
        a.push(p.tau[12]);
        b.push(p.tau[13]);
        h30.push(p.h[30]);
    }
    let (m, se, v, v_se) = moments(&a);
    assert!((m - d.dlog[12]).abs() <= 3.0 * se);
    assert!((v - d.d2log[12]).abs() <= 3.0 * v_se);
    let (ma, _, va, _) = moments(&a);
    let (mb, _, vb, _) = moments(&b);
    let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (reps as f64 - 1.0);
    let corr = cov / (va * vb).sqrt();
    assert!(corr.abs() <= 3.0 / (reps as f64).sqrt(), "corr {corr}");
    let (mh, mh_se, vh, vh_se) = moments(&h30);
    let mean: f64 = d.dlog[1..=30].iter().sum();
    let var: f64 = d.d2log[1..=30].iter().sum();
    assert!((mh - mean).abs() <= 3.0 * mh_se);
    assert!((vh - var).abs() <= 3.0 * vh_se);
}

#[test]
fn untilted_oracle_agrees_with_recursion() {
    let env = sample_environment(&EnvDistribution::Uniform { lo: 0.05, hi: 0.3 }, -100, 10, 4).unwrap();
    let p = phi_profile(&env, -0.3, 5, 64, 1e-12).unwrap();
    let o = mc_phi_oracle(&env, -0.3, 2, 400_000, 100_000, 6).unwrap();
    assert!(o.bias_bound < 1e-12);
    assert!((o.mean - p.phi(2)).abs() <= 3.0 * o.se, "{} ± {} vs {}", o.mean, o.se, p.phi(2));
    assert!(mc_phi_oracle(&env, -0.3, 4, 100, 1000, 1).is_err());
    assert!(mc_phi_oracle(&env, 0.1, 1, 100, 1000, 1).is_err());
}

fn table_and_walker<'a>(env: &'a Environment, tilt: &TiltSolution, n: usize) -> (CenteringTable<f64>, TiltedWalker<'a>) {
    (
        centering_table(env, tilt, n, 64, 1e-10).unwrap(),
        TiltedWalker::with_eta(env, tilt.eta_bar, n, 64, 1e-10).unwrap(),
    )
}

#[test]
fn rw_barrier_is_monotone_in_start_height() {
    let tilt = brwre::tilt::solve_tilt(
        &EnvDistribution::default(),
        &TiltOptions {
            env_samples: 20_000,
            noise_tol: 1e-3,
            ..TiltOptions::default()
        },
    )
    .unwrap();
    let env = sample_environment(&EnvDistribution::default(), -300, 40, 8).unwrap();
    let (table, walker) = table_and_walker(&env, &tilt, 32);
    let profile = BarrierProfile::from_values(table.w[..=32].to_vec(), "W").unwrap();
    let mut prev = 0.0;
    for y in [4.0, 6.0, 9.0, 14.0] {
        let ev = BarrierEvent {
            start_y: y,
            end: EndInterval::all(),
            profile: profile.clone(),
        };
        let p = estimate_barrier_prob_rw(&walker, &table, &ev, 20_000, 77).unwrap();
        assert!(p.p_hat >= prev);
        prev = p.p_hat;
    }
    let absent = BarrierEvent {
        start_y: 0.0,
        end: EndInterval::all(),
        profile: BarrierProfile::constant(32, -1e9, "absent"),
    };
    assert_abs_diff_eq!(estimate_barrier_prob_rw(&walker, &table, &absent, 1000, 1).unwrap().p_hat, 1.0);
}
