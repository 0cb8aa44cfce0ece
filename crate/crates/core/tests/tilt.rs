mod common;

use approx::assert_abs_diff_eq;
use brwre::env::{sample_environment, EnvDistribution, Environment};
use brwre::tilt::{centering_table, phi_derivatives, phi_profile, solve_tilt, CenteringTable, TiltOptions};
use common::{closed_form_l, diff, diff2, homogeneous_speed};

fn flat() -> Environment {
    Environment::homogeneous(0.2, -200, 40).unwrap()
}

#[test]
fn homogeneous_derivatives_match_closed_form() {
    for eta in [-0.05, -0.2, -0.5, -1.0, -3.0] {
        let d = phi_derivatives(&flat(), eta, 8, 128, 1e-12).unwrap();
        let (l, dl, d2l) = closed_form_l(eta);
        for k in 1..=8 {
            assert_abs_diff_eq!(d.log_phi[k], l, epsilon = 1e-11);
            assert_abs_diff_eq!(d.dlog[k], dl, epsilon = 1e-9 * dl);
            assert_abs_diff_eq!(d.d2log[k], d2l, epsilon = 1e-7 * d2l);
        }
    }
}

#[test]
fn random_environment_derivatives_match_finite_differences() {
    let env = sample_environment(&EnvDistribution::Uniform { lo: 0.05, hi: 0.3 }, -200, 30, 42).unwrap();
    let h = 1e-4;
    for eta in [-0.1, -0.4] {
        let d = phi_derivatives(&env, eta, 20, 128, 1e-12).unwrap();
        for k in [1usize, 7, 20] {
            let l = |e: f64| phi_profile(&env, e, 20, 128, 1e-12).unwrap().log_phi(k as i64);
            assert_abs_diff_eq!(d.dlog[k], diff(l, eta, h), epsilon = 1e-6);
            assert_abs_diff_eq!(d.d2log[k], diff2(l, eta, 1e-3), epsilon = 1e-4 * d.d2log[k].max(1.0));
        }
    }
}

#[test]
fn bracket_contains_the_deep_value() {
    let env = sample_environment(&EnvDistribution::default(), -400, 20, 3).unwrap();
    let shallow = phi_profile(&env, -0.1, 20, 16, 1.0).unwrap();
    let deep = phi_profile(&env, -0.1, 20, 384, 1e-13).unwrap();
    for k in 1..=20 {
        let (lo, hi) = shallow.bracket(k);
        assert!(lo <= deep.phi(k) + 1e-15 && deep.phi(k) <= hi + 1e-15);
    }
}

#[test]
fn degenerate_tilt_matches_homogeneous_speed() {
    let dist = EnvDistribution::Discrete {
        values: vec![0.3],
        weights: vec![1.0],
    };
    let opts = TiltOptions {
        env_samples: 200,
        ..TiltOptions::default()
    };
    let sol = solve_tilt(&dist, &opts).unwrap();
    assert!(sol.residual < 1e-8);
    assert_abs_diff_eq!(sol.v0, homogeneous_speed(0.3), epsilon = 1e-6);
    assert!(sol.argmax_ok);
}

#[test]
fn homogeneous_table_has_zero_fluctuation() {
    let dist = EnvDistribution::Discrete {
        values: vec![0.2],
        weights: vec![1.0],
    };
    let opts = TiltOptions {
        env_samples: 200,
        ..TiltOptions::default()
    };
    let tilt = solve_tilt(&dist, &opts).unwrap();
    let env = sample_environment(&dist, -100, 40, 1).unwrap();
    let t: CenteringTable<f64> = centering_table(&env, &tilt, 40, 64, 1e-12).unwrap();
    let (l, dl, d2l) = closed_form_l(tilt.eta_bar);
    for k in 0..=40 {
        assert_abs_diff_eq!(t.w[k], 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(t.k[k], -(k as f64) * l, epsilon = 1e-9);
        assert_abs_diff_eq!(t.sigma2[k], k as f64 * d2l, epsilon = 1e-6);
    }
    assert_abs_diff_eq!(1.0 / dl, tilt.v0, epsilon = 1e-9);
}

#[test]
fn centering_table_arrays_are_consistent() {
    let tilt = solve_tilt(&EnvDistribution::default(), &TiltOptions {
        env_samples: 20_000,
        noise_tol: 1e-3,
        ..TiltOptions::default()
    })
    .unwrap();
    let env = sample_environment(&EnvDistribution::default(), -100, 64, 17).unwrap();
    let t: CenteringTable<f64> = centering_table(&env, &tilt, 64, 64, 1e-10).unwrap();
    assert_eq!(t.k[0], 0.0);
    assert_eq!(t.sigma2[0], 0.0);
    let mut mean = 0.0;
    for k in 1..=64 {
        assert!(t.k[k] > t.k[k - 1]);
        assert_abs_diff_eq!(t.sigma2[k] - t.sigma2[k - 1], t.xi2[k], epsilon = 1e-12);
        mean += t.mean_tau[k];
        assert_abs_diff_eq!(t.w[k], t.k[k] / t.theta_star - mean, epsilon = 1e-9);
    }
    let t32: CenteringTable<f32> = centering_table(&env, &tilt, 64, 64, 1e-5).unwrap();
    assert!((f64::from(t32.k[64]) - t.k[64]).abs() < 1e-3 * t.k[64]);
}
