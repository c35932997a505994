use kdv_core::simulator::*;
use kdv_core::spectrum_a::real_spectrum_a;
use proptest::prelude::*;
use std::f64::consts::PI;

fn bump(len: f64, n: usize) -> GridFunction {
    GridFunction::from_fn(len, n, |x| {
        let s = x * (len - x) / (len * len);
        16.0 * s * s * (1.0 + 0.5 * (2.0 * x).sin())
    })
}

fn l2_diff(a: &GridFunction, b: &GridFunction) -> f64 {
    a.add_scaled(b, -1.0).unwrap().norm()
}

#[test]
fn real_eigenmode_decays_at_its_eigenvalue() {
    let len = 5.0;
    let f = &real_spectrum_a(len, 1).unwrap()[0];
    let zeta = f.zeta.re;
    assert!(zeta < 0.0 && f.zeta.im.abs() < 1e-12);
    // Fix the phase so that the real part carries the mode.
    let phase = f.eval(0.3 * len).conj() / f.eval(0.3 * len).norm();
    let y0 = GridFunction::from_fn(len, 1024, |x| (phase * f.eval(x)).re);
    let t = 1.5;
    let traj = simulate(&y0, None, t, &SimConfig::new(1024, 2e-3)).unwrap();
    let expect = y0.scaled((zeta * t).exp());
    let rel = l2_diff(traj.final_state(), &expect) / expect.norm();
    assert!(rel < 1e-3, "shape error {rel}");
    let ratio = traj.energy.last().unwrap() / traj.energy[0];
    assert!((ratio / (2.0 * zeta * t).exp() - 1.0).abs() < 0.01, "energy ratio {ratio}");
}

#[test]
fn free_flow_energy_is_nonincreasing() {
    let len = 2.0 * PI + 0.3;
    let y0 = bump(len, 512);
    for nonlinear in [false, true] {
        let cfg = SimConfig::new(512, 5e-3);
        let traj = if nonlinear {
            simulate_nonlinear(&y0, 2.0, &cfg).unwrap()
        } else {
            simulate(&y0, None, 2.0, &cfg).unwrap()
        };
        // Simpson's energy is not the quantity the scheme dissipates exactly,
        // so single steps may gain at the discretization level.
        for w in traj.energy.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-6), "nonlinear = {nonlinear}: energy grew: {} -> {}", w[0], w[1]);
        }
        assert!(traj.energy.last().unwrap() < &traj.energy[0]);
    }
}

#[test]
fn controlled_run_satisfies_the_energy_identity() {
    let len = 7.0;
    let y0 = bump(len, 2048);
    let u = |t: f64| 0.3 * (3.0 * t).sin() * (-t).exp();
    let traj = simulate(&y0, Some(&u), 2.0, &SimConfig::new(2048, 1e-3)).unwrap();
    assert!(traj.energy_identity_defect < 0.01, "defect {}", traj.energy_identity_defect);
    assert_eq!(traj.boundary_trace_dxl[0], 0.0);
    assert!((traj.boundary_trace_dxl[1000] - u(1.0)).abs() < 1e-12);
}

#[test]
fn grid_refinement_converges() {
    let len = 7.0;
    let t = 0.5;
    let finals: Vec<GridFunction> = [256usize, 512, 1024]
        .iter()
        .map(|&n| {
            let tr = simulate(&bump(len, n), None, t, &SimConfig::new(n, 1e-3)).unwrap();
            tr.final_state().clone()
        })
        .collect();
    // Compare on the coarse nodes.
    let restrict = |g: &GridFunction, k: usize| GridFunction {
        len,
        n: 256,
        values: g.values.iter().step_by(k).copied().collect(),
    };
    let e1 = l2_diff(&finals[0], &restrict(&finals[1], 2));
    let e2 = l2_diff(&restrict(&finals[1], 2), &restrict(&finals[2], 4));
    assert!(e1 / e2 > 2.5, "refinement ratio {} ({e1} -> {e2})", e1 / e2);
    assert!(e2 < 1e-2 * finals[2].norm());
}

#[test]
fn tiny_data_behave_linearly() {
    let len = 2.0 * PI + 0.3;
    let y0 = bump(len, 256).scaled(1e-6);
    let cfg = SimConfig::new(256, 1e-2);
    let lin = simulate(&y0, None, 3.0, &cfg).unwrap();
    let non = simulate_nonlinear(&y0, 3.0, &cfg).unwrap();
    let rel = l2_diff(lin.final_state(), non.final_state()) / lin.final_state().norm();
    assert!(rel < 1e-5, "relative nonlinear effect {rel}");
    assert!(rel > 0.0);
}

#[test]
fn unobservable_mode_has_infinite_ratio() {
    let len = 2.0 * PI;
    let cfg = SimConfig::new(1024, 2e-3);
    let y0 = GridFunction::from_fn(len, 1024, |x| 1.0 - x.cos());
    assert_eq!(observability_ratio(&y0, 2.0, &cfg).unwrap(), f64::INFINITY);
    let r = observability_ratio(&bump(len, 1024), 2.0, &cfg).unwrap();
    assert!(r.is_finite() && r > 0.0);
}

#[test]
fn decay_rate_fit_recovers_an_exponential() {
    let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.1).collect();
    let energy: Vec<f64> = times.iter().map(|t| 3.0 * (-0.37 * t).exp()).collect();
    let r = fit_decay_rate(&times, &energy, 2.0, 8.0).unwrap();
    assert!((r - 0.37).abs() < 1e-12);
    assert!(fit_decay_rate(&times, &energy, 20.0, 30.0).is_err());
}

#[test]
fn step_count_covers_the_horizon() {
    assert_eq!(step_count(1.0, 0.1).unwrap().0, 10);
    let (n, dt) = step_count(1.0, 0.3).unwrap();
    assert_eq!(n, 4);
    assert!((dt - 0.25).abs() < 1e-15);
    assert!(step_count(0.0, 0.1).is_err());
    assert!(step_count(1.0, -0.1).is_err());
}

#[test]
fn invalid_runs_are_rejected() {
    let y0 = bump(7.0, 64);
    assert!(simulate(&y0, None, 1.0, &SimConfig::new(128, 0.01)).is_err());
    let mut bad = y0.clone();
    bad.values[3] = f64::NAN;
    assert!(simulate(&bad, None, 1.0, &SimConfig::new(64, 0.01)).is_err());
    assert!(simulate(&bump(7.0, 8), None, 1.0, &SimConfig::new(8, 0.01)).is_err());
    assert!(CnStepper::new(-1.0, 64, 0.01).is_err());
}

#[test]
fn decay_sweep_validates_its_input() {
    let cfg = DecayConfig::default();
    assert!(decay_sweep(5.0, &[0.1], &cfg).is_err());
    assert!(decay_sweep(2.0 * PI, &[], &cfg).is_err());
    assert!(decay_sweep(2.0 * PI, &[0.1, 0.0], &cfg).is_err());
    let coarse = DecayConfig {
        n: 8,
        ..DecayConfig::default()
    };
    assert!(decay_sweep(2.0 * PI, &[0.1], &coarse).is_err());
}

#[test]
fn decay_sweep_skips_long_runs_with_a_warning() {
    let cfg = DecayConfig {
        n: 128,
        dt: 0.02,
        h_horizon: 2.0,
        obs_horizon: 1.0,
        max_steps: 0,
        ..DecayConfig::default()
    };
    let rep = decay_sweep(2.0 * PI, &[0.2, 0.1], &cfg).unwrap();
    assert_eq!(rep.entries.len(), 2);
    assert!(rep.failures.is_empty());
    assert_eq!(rep.warnings.len(), 2);
    for e in &rep.entries {
        assert!(e.m_rate_sim.is_none());
        assert!(e.m_rate_eigen > 0.0);
        assert!(e.h_rate_sim > 0.0);
    }
    // The slowest rate closes like δ².
    let x = rep.m_exponent_eigen.unwrap();
    assert!((x - 2.0).abs() < 0.1, "exponent {x}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn linear_flow_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, k in 1usize..4) {
        let len = 6.0;
        let n = 64;
        let y1 = bump(len, n);
        let y2 = GridFunction::from_fn(len, n, |x| (PI * k as f64 * x / len).sin() * x / len);
        let cfg = SimConfig::new(n, 0.02);
        let u = |t: f64| 0.1 * t;
        let zero = |_: f64| 0.0;
        let s1 = simulate(&y1, Some(&zero), 0.4, &cfg).unwrap();
        let s2 = simulate(&y2, Some(&u), 0.4, &cfg).unwrap();
        let combo = y1.scaled(a).add_scaled(&y2, b).unwrap();
        let ub = |t: f64| b * u(t);
        let sc = simulate(&combo, Some(&ub), 0.4, &cfg).unwrap();
        let expect = s1.final_state().scaled(a).add_scaled(s2.final_state(), b).unwrap();
        prop_assert!(l2_diff(sc.final_state(), &expect) < 1e-12 * (1.0 + expect.norm()));
    }
}
