use kdv_core::biortho::{build_family, BiorthogonalFamily, FamilyOptions};
use kdv_core::control::*;
use kdv_core::modulated::{solve_h, solve_h_mu};
use kdv_core::numerics::{fd_weights, gauss_c};
use kdv_core::simulator::{modal_duhamel, GridFunction, SpectralState};
use kdv_core::spectrum_a::quasi_invariant_basis;
use kdv_core::spectrum_b::{full_spectrum, SpectrumB};
use num_complex::Complex64 as C64;
use proptest::prelude::*;
use std::f64::consts::PI;

const LEN: f64 = 2.0 * PI + 0.3;

fn setup(k: usize) -> (SpectrumB, BiorthogonalFamily) {
    let spec = full_spectrum(LEN, 24).unwrap();
    let fam = build_family(&spec, 2.0, k, &FamilyOptions::default()).unwrap();
    (spec, fam)
}

/// A real state: `z_{−j} = conj z_j` for `0 < j ≤ k`.
fn real_state(k: usize, data: &[(f64, f64)]) -> SpectralState {
    let mut s = SpectralState::zeros(LEN, k);
    for (j, &(re, im)) in (1..=k as i64).zip(data) {
        s.coeffs.insert(j, C64::new(re, im));
        s.coeffs.insert(-j, C64::new(re, -im));
    }
    s
}

#[test]
fn h_mu_inner_matches_quadrature() {
    let spec = full_spectrum(LEN, 8).unwrap();
    for mu in [0.7, 12.0, 300.0] {
        let h = solve_h_mu(mu, LEN).unwrap();
        for j in [-3, 1, 5] {
            let m = spec.mode(j).unwrap();
            let q = gauss_c(|x| h.value(x) * m.eval(x).conj(), 0.0, LEN, 200);
            let c = h_mu_inner(&spec, mu, j).unwrap();
            assert!((q - c).norm() < 1e-11 * (1.0 + c.norm()), "μ = {mu}, j = {j}: {q} vs {c}");
        }
    }
}

#[test]
fn zero_mode_lift_coefficients_match_quadrature() {
    let spec = full_spectrum(LEN, 8).unwrap();
    let h = solve_h(LEN).unwrap();
    for j in [-2, 1, 4] {
        let m = spec.mode(j).unwrap();
        let q = gauss_c(|x| h.value(x) * m.eval(x).conj(), 0.0, LEN, 200);
        assert!((q - lift_coefficient(&spec, j).unwrap()).norm() < 1e-11);
    }
}

#[test]
fn dual_pairing_closed_forms_match_quadrature() {
    let len = 2.0 * PI + 0.02;
    let spec = full_spectrum(len, 8).unwrap();
    let basis = quasi_invariant_basis(&spec, 2.0 * PI).unwrap();
    let f = &basis.basis_a[0];
    for j in [-2, 1, 3] {
        let m = spec.mode(j).unwrap();
        let q = gauss_c(|x| m.eval(x) * f.eval(len - x).conj(), 0.0, len, 200);
        let c = dual_e_f(&spec, j, f).unwrap();
        assert!((q - c).norm() < 1e-10 * (1.0 + c.norm()), "j = {j}: {q} vs {c}");
    }
    let mu = 9.0;
    let h = solve_h_mu(mu, len).unwrap();
    let q = gauss_c(|x| h.value(x) * f.eval(len - x).conj(), 0.0, len, 200);
    let c = dual_h_f(h.deriv(len, 1), mu, f);
    assert!((q - c).norm() < 1e-10 * (1.0 + c.norm()), "{q} vs {c}");
}

#[test]
fn resolvent_slope_is_the_limit_of_the_mode_sum() {
    let spec = full_spectrum(LEN, 80).unwrap();
    let exact = lift_resolvent_slope(LEN).unwrap();
    let partial = |k: usize| -> f64 {
        spec.modes
            .iter()
            .filter(|m| m.index.unsigned_abs() as usize <= k)
            .map(|m| m.de_at_l.norm_sqr() / (m.lambda * m.lambda))
            .sum()
    };
    let (s20, s80) = (partial(20), partial(80));
    assert!(s20 < s80 && s80 < exact);
    assert!((exact - s80) < 0.1 * (exact - s20));
    assert!((exact - s80).abs() < 1e-5 * exact.abs(), "{s80} vs {exact}");
    assert!(lift_resolvent_slope(4.0 * PI).is_err());
}

#[test]
fn synthesized_control_solves_the_moment_problem() {
    let k = 4;
    let (spec, fam) = setup(k);
    let z0 = real_state(k, &[(0.3, -0.1), (0.05, 0.2), (-0.12, 0.0), (0.02, 0.04)]);
    let zt = SpectralState::zeros(LEN, k);
    let v = synthesize_v(&z0, &zt, &fam, &spec).unwrap();
    assert!(v.imag_defect < 1e-10);
    let steps = 4096;
    let [vs, _, _] = v.sample(steps);
    let res = moment_residuals(&vs, fam.t, &spec, &z0, &zt).unwrap();
    let nz = z0.norm();
    for (j, r) in &res {
        assert!(r.norm() < 1e-7 * nz, "mode {j}: residual {r}");
    }
    // The modal solution driven by piecewise-linear v lands at zero up to a
    // second-order interpolation error.
    let miss = |n: usize| modal_duhamel(&z0, &v.sample(n)[0], fam.t, &spec).unwrap().norm();
    let (coarse, fine) = (miss(2048), miss(8192));
    assert!(coarse / fine > 12.0, "{coarse} -> {fine}");
    assert!(fine < 3e-6 * nz, "final modal norm {fine}");
    // v vanishes near both ends of the horizon.
    assert!(vs[0].abs() < 1e-14 && vs[steps].abs() < 1e-14);
}

#[test]
fn zero_data_gives_zero_control() {
    let k = 3;
    let (spec, fam) = setup(k);
    let z = SpectralState::zeros(LEN, k);
    let v = synthesize_v(&z, &z, &fam, &spec).unwrap();
    assert!(v.terms.is_empty());
    assert_eq!(v.sup_norm(), 0.0);
    assert_eq!(v.value(0.7), 0.0);
}

#[test]
fn data_beyond_the_family_is_rejected() {
    let (spec, fam) = setup(3);
    let mut z = SpectralState::zeros(LEN, 6);
    z.coeffs.insert(5, C64::new(1.0, 0.0));
    z.coeffs.insert(-5, C64::new(1.0, 0.0));
    let zt = SpectralState::zeros(LEN, 3);
    assert!(synthesize_v(&z, &zt, &fam, &spec).is_err());
    let other = SpectralState::zeros(LEN + 1.0, 3);
    assert!(synthesize_v(&other, &zt, &fam, &spec).is_err());
}

#[test]
fn modal_run_reaches_its_target() {
    let k = 4;
    let (spec, fam) = setup(k);
    let z0 = real_state(k, &[(0.1, 0.1), (0.0, -0.2), (0.07, 0.03), (0.0, 0.0)]);
    let zt = real_state(k, &[(0.0, 0.05), (0.02, 0.0), (0.0, 0.0), (0.01, -0.01)]);
    let v = synthesize_v(&z0, &zt, &fam, &spec).unwrap();
    let run = run_z_system(&z0, &v, &spec, 4096).unwrap();
    for j in (-(k as i64)..=k as i64).filter(|&j| j != 0) {
        let d = run.final_state.get(j) - zt.get(j);
        assert!(d.norm() < 1e-6, "mode {j}: {d}");
    }
    assert_eq!(run.times.len(), 4097);
    assert!(run_z_system(&z0, &v, &spec, 0).is_err());
}

#[test]
fn basic_transition_satisfies_its_rows() {
    let spec = full_spectrum(LEN, 12).unwrap();
    let y = GridFunction::from_fn(LEN, 512, |x| (x * (LEN - x)).powi(2) / 50.0);
    let data = BoundaryData {
        dx0: 0.4,
        dp_dx0: -3.0,
    };
    let mus = [20.0, 40.0];
    let tc = transition_tc(&y, data, TransitionVariant::Basic2, &mus, &spec, None).unwrap();
    assert!((tc.c[0] + tc.c[1] + data.dx0).abs() < 1e-12);
    assert!((mus[0] * tc.c[0] + mus[1] * tc.c[1] + data.dp_dx0).abs() < 1e-10);
    assert!(tc.residual < 1e-10);
    assert!(tc.condition.is_finite());

    assert!(transition_tc(&y, data, TransitionVariant::Basic2, &[20.0], &spec, None).is_err());
    assert!(transition_tc(&y, data, TransitionVariant::Basic2, &[20.0, 20.0], &spec, None).is_err());
    assert!(transition_tc(&y, data, TransitionVariant::Basic2, &[-1.0, 2.0], &spec, None).is_err());
    assert!(transition_tc(&y, data, TransitionVariant::S1_3, &[1.0, 2.0, 3.0], &spec, None).is_err());
}

#[test]
fn boundary_differences_are_exact_on_polynomials() {
    let y = GridFunction::from_fn(LEN, 256, |x| x * (LEN - x));
    let d = BoundaryData::from_grid(&y).unwrap();
    assert!((d.dx0 - LEN).abs() < 1e-9);
    assert!((d.dp_dx0 + 2.0).abs() < 1e-6);

    let xs = [0.0, 0.1, 0.25, 0.3, 0.55];
    let w = fd_weights(0.0, &xs, 3);
    let apply = |k: usize, f: &dyn Fn(f64) -> f64| -> f64 { w[k].iter().zip(xs).map(|(a, x)| a * f(x)).sum() };
    let cubic = |x: f64| 2.0 - x + 3.0 * x * x - 0.5 * x * x * x;
    assert!((apply(0, &cubic) - 2.0).abs() < 1e-12);
    assert!((apply(1, &cubic) + 1.0).abs() < 1e-10);
    assert!((apply(2, &cubic) - 6.0).abs() < 1e-8);
    assert!((apply(3, &cubic) + 3.0).abs() < 1e-6);
}

#[test]
fn trace_boundary_data_uses_the_flow() {
    // y_x(t, 0) = 1 + 2t  ⇒  (𝒫y)_x(0) = −2.
    let dt = 0.01;
    let trace: Vec<f64> = (0..10).map(|k| 1.0 + 2.0 * k as f64 * dt).collect();
    let d = BoundaryData::from_trace(&trace, dt).unwrap();
    assert!((d.dx0 - 1.18).abs() < 1e-14);
    assert!((d.dp_dx0 + 2.0).abs() < 1e-10);
    assert!(BoundaryData::from_trace(&trace[..2], dt).is_err());
}

#[test]
fn dyadic_schedule() {
    let s = iteration_schedule(8.0, 4.0, 1, 3).unwrap();
    assert_eq!(s.len(), 3);
    assert_eq!((s[0].t_start, s[0].t_end), (0.0, 4.0));
    assert_eq!((s[2].t_start, s[2].t_end), (6.0, 7.0));
    assert!((s[0].mu1 - 4.0 * 8.0).abs() < 1e-12);
    assert!((s[1].mu1 / s[0].mu1 - 2f64.powf(1.5)).abs() < 1e-12);
    assert!(iteration_schedule(0.0, 4.0, 0, 3).is_err());
    assert!(iteration_schedule(1.0, 0.0, 0, 3).is_err());
    assert!(iteration_schedule(1.0, 1.0, 0, 0).is_err());
    assert_eq!(k_check(8), 6);
    assert_eq!(k_check(2), 1);
}

#[test]
fn projection_round_trip_and_parseval() {
    let spec = full_spectrum(LEN, 16).unwrap();
    let z = real_state(3, &[(0.2, 0.1), (-0.05, 0.3), (0.0, 0.01)]);
    let g = z.to_grid(&spec, 1024).unwrap();
    let back = project_upto(&g, &spec, 6).unwrap();
    for j in (-6i64..=6).filter(|&j| j != 0) {
        assert!((back.get(j) - z.get(j)).norm() < 1e-8, "mode {j}");
    }
    // The real part of Σ z_j ℰ_j with conjugate-symmetric z_j is the full sum.
    assert!(parseval_defect(&g, &back).abs() < 1e-8);
    let coarse = GridFunction::zeros(LEN, 8);
    assert!(project_upto(&coarse, &spec, 16).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthesis_is_linear(
        a in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 3),
        b in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 3),
        s in -3.0f64..3.0,
    ) {
        let (spec, fam) = setup(3);
        let zero = SpectralState::zeros(LEN, 3);
        let za = real_state(3, &a);
        let zb = real_state(3, &b);
        let mut zc = za.clone();
        for (j, c) in zc.coeffs.iter_mut() {
            *c += s * zb.get(*j);
        }
        let va = synthesize_v(&za, &zero, &fam, &spec).unwrap();
        let vb = synthesize_v(&zb, &zero, &fam, &spec).unwrap();
        let vc = synthesize_v(&zc, &zero, &fam, &spec).unwrap();
        for t in [0.3, 0.9, 1.0, 1.42] {
            let lhs = vc.value(t);
            let rhs = va.value(t) + s * vb.value(t);
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()), "t = {}: {} vs {}", t, lhs, rhs);
        }
    }
}
