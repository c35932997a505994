//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero when any criterion fails.

use kdv_core::biortho::{build_family, CompensationRequest, FamilyOptions};
use kdv_core::control::{
    null_control, run_transition_stabilization, Scheme, StabilizationParams,
};
use kdv_core::critical_lengths::{classify_length, lambda_c, CriticalPair, LengthClass};
use kdv_core::modulated::solve_h_mu;
use kdv_core::numerics::{gauss, loglog_slope};
use kdv_core::simulator::{decay_sweep, simulate, DecayConfig, GridFunction, SimConfig, SpectralState};
use kdv_core::spectrum_a::{eigen_near, quasi_invariant_basis};
use kdv_core::spectrum_b::{elliptic_eigenvalues, full_spectrum, rotation_matrix};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::time::Instant;

type Outcome = Result<(bool, String), String>;

fn within(x: f64, lo: f64, hi: f64) -> bool {
    x >= lo && x <= hi
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cases: [(f64, LengthClass, usize); 4] = [
        (2.0 * PI, LengthClass::N1, 1),
        (2.0 * PI * (7.0f64 / 3.0).sqrt(), LengthClass::N2, 2),
        (2.0 * PI * 7f64.sqrt(), LengthClass::N3, 2),
        (14.0 * PI, LengthClass::N3, 3),
    ];
    let mut ok = true;
    let mut notes = Vec::new();
    for (l0, class, n0) in cases {
        let c = classify_length(l0, 1e-9).map_err(|e| e.to_string())?.ok_or("not critical")?;
        ok &= c.class == class && c.n0 == n0;
        notes.push(format!("{:?}/N0={}", c.class, c.n0));
        if (l0 - 14.0 * PI).abs() < 1e-9 {
            let pairs: Vec<(u64, u64)> = c.pairs.iter().map(|p| (p.k, p.l)).collect();
            ok &= pairs == vec![(7, 7), (11, 2)];
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 1.0;
    Ok((ok, format!("{} in {secs:.3}s", notes.join(", "))))
}

fn criterion_2() -> Outcome {
    let a = lambda_c(&CriticalPair::new(2, 1).map_err(|e| e.to_string())?);
    let b = lambda_c(&CriticalPair::new(4, 1).map_err(|e| e.to_string())?);
    let ea = (a - 20.0 / (21.0 * 21f64.sqrt())).abs();
    let eb = (b - 6.0 * 7f64.sqrt() / 49.0).abs();
    Ok((ea < 1e-12 && eb < 1e-12, format!("errors {ea:.1e}, {eb:.1e}")))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let len = 2.0 * PI + 0.05;
    let spec = full_spectrum(len, 30).map_err(|e| e.to_string())?;
    let mut worst_ode: f64 = 0.0;
    for m in &spec.modes {
        let (mut r, mut scale) = (0.0f64, 0.0f64);
        for i in 0..=200 {
            let x = len * i as f64 / 200.0;
            let (d0, d1, d3) = (m.eval(x), m.deriv(x, 1), m.deriv(x, 3));
            let il = C64::new(0.0, m.lambda);
            r = r.max((d3 + d1 + il * d0).norm());
            scale = scale.max(d3.norm() + d1.norm() + (il * d0).norm());
        }
        worst_ode = worst_ode.max(r / scale);
    }
    let mut gram: f64 = 0.0;
    for j in (-8..=8).filter(|&j| j != 0) {
        for k in (-8..=8).filter(|&k| k != 0) {
            let g = spec.mode(j).unwrap().func.inner(&spec.mode(k).unwrap().func);
            let id = if j == k { 1.0 } else { 0.0 };
            gram = gram.max((g - id).norm());
        }
    }
    let ratio = spec.mode(20).unwrap().lambda / (2.0 * 20.0 * PI / len).powi(3);
    let secs = start.elapsed().as_secs_f64();
    let ok = worst_ode < 1e-8 && gram < 1e-7 && within(ratio, 0.97, 1.03) && secs < 10.0;
    Ok((
        ok,
        format!("ODE residual {worst_ode:.1e}, Gram defect {gram:.1e}, λ20 ratio {ratio:.4}, {secs:.2}s"),
    ))
}

fn criterion_4() -> Outcome {
    let d = 1e-3;
    let ell = elliptic_eigenvalues(2.0 * PI + d).map_err(|e| e.to_string())?;
    let l1 = ell.iter().cloned().fold(f64::INFINITY, f64::min);
    let pred = d / (3f64.sqrt() * PI);
    let e1 = (l1 - pred).abs() / pred;

    let l0 = 2.0 * PI * 7f64.sqrt();
    let lc = lambda_c(&CriticalPair::new(4, 1).map_err(|e| e.to_string())?);
    let mean_near = |len: f64| -> Result<f64, String> {
        let mut ev = elliptic_eigenvalues(len).map_err(|e| e.to_string())?;
        ev.sort_by(|a, b| (a - lc).abs().partial_cmp(&(b - lc).abs()).unwrap());
        Ok(0.5 * (ev[0] + ev[1]))
    };
    let h = 2e-3;
    let drift = (mean_near(l0 + h)? - mean_near(l0 - h)?) / (2.0 * h);
    let target = -9.0 / (49.0 * PI);
    let e2 = (drift - target).abs() / target.abs();
    Ok((
        e1 < 0.05 && e2 < 0.10,
        format!("λ1 rel err {e1:.2e}, drift {drift:.5} vs {target:.5} (rel {e2:.2e})"),
    ))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let deltas = [1e-1, 1e-2, 1e-3];
    let models = [(1u64, 1u64), (2, 1), (4, 1)];
    let mut ok = true;
    let mut notes = Vec::new();
    for (k, l) in models {
        let pair = CriticalPair::new(k, l).map_err(|e| e.to_string())?;
        let l0 = pair.length();
        let mut re = Vec::new();
        let mut df = Vec::new();
        for &d in &deltas {
            let m = eigen_near(&pair, l0, l0 + d, false).map_err(|e| e.to_string())?;
            re.push(m.zeta.re);
            df.push(m.df_at_0.norm());
        }
        let (s1, s2) = (loglog_slope(&deltas, &re), loglog_slope(&deltas, &df));
        ok &= (s1 - 2.0).abs() <= 0.1 && (s2 - 1.0).abs() <= 0.1;
        notes.push(format!("({k},{l}) {s1:.3}/{s2:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 30.0;
    Ok((ok, format!("slopes Re ζ/ℱ'(0): {}, {secs:.2}s", notes.join(", "))))
}

fn criterion_6() -> Outcome {
    let mut ok = true;
    let mut worst = (0.0f64, 0.0f64);
    for (k, l) in [(1, 1), (4, 1), (7, 7)] {
        let r = rotation_matrix(&CriticalPair::new(k, l).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        ok &= r.orthogonality_defect < 1e-12 && r.agreement < 1e-10;
        worst = (worst.0.max(r.orthogonality_defect), worst.1.max(r.agreement));
    }
    Ok((ok, format!("orthogonality {:.1e}, agreement {:.1e}", worst.0, worst.1)))
}

fn criterion_7() -> Outcome {
    let len = 2.0 * PI + 0.3;
    let mut ok = true;
    let (mut bc, mut ode) = (0.0f64, 0.0f64);
    let mut sup_scaled = Vec::new();
    let mut l2_scaled = Vec::new();
    for &mu in &[1e1, 1e2, 1e3, 1e4, 1e5, 1e6] {
        let h = solve_h_mu(mu, len).map_err(|e| e.to_string())?;
        let (d0, dl) = h.boundary();
        bc = bc.max(h.value(0.0).abs()).max(h.value(len).abs()).max((dl - d0 - 1.0).abs());
        let samples = 20_000;
        let mut sup: f64 = 0.0;
        for i in 0..=samples {
            let x = len * i as f64 / samples as f64;
            let r = h.deriv(x, 3) + h.deriv(x, 1) - mu * h.value(x);
            let scale = h.deriv(x, 3).abs() + h.deriv(x, 1).abs() + (mu * h.value(x)).abs();
            ode = ode.max(r.abs() / scale.max(1e-300).max(mu.powf(-1.0 / 3.0) * 1e-6));
            sup = sup.max(h.value(x).abs());
        }
        let panels = 400 + (len * mu.cbrt()) as usize * 4;
        let l2 = gauss(|x| h.deriv(x, 1).powi(2), 0.0, len, panels).sqrt();
        sup_scaled.push(sup * mu.cbrt());
        l2_scaled.push(l2 * mu.powf(1.0 / 6.0));
    }
    let range = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (s_lo, s_hi) = range(&sup_scaled);
    let (l_lo, l_hi) = range(&l2_scaled);
    ok &= bc < 1e-10 && ode < 1e-8;
    ok &= s_lo > 0.05 && s_hi < 20.0 && s_hi / s_lo < 10.0;
    ok &= l_lo > 0.05 && l_hi < 20.0 && l_hi / l_lo < 10.0;
    let d0 = solve_h_mu(1e4, len).map_err(|e| e.to_string())?.boundary().0;
    ok &= (d0 + 1.0).abs() < 0.02;
    Ok((
        ok,
        format!(
            "bc {bc:.1e}, ODE {ode:.1e}, sup·μ^(1/3) ∈ [{s_lo:.3}, {s_hi:.3}], ‖h'‖·μ^(1/6) ∈ [{l_lo:.3}, {l_hi:.3}], h'(0) at 1e4 = {d0:.5} (limit −1)"
        ),
    ))
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let spec = full_spectrum(2.0 * PI + 0.3, 12).map_err(|e| e.to_string())?;
    let fam = build_family(&spec, 2.0, 8, &FamilyOptions::default()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for j in (-4i64..=4).filter(|&j| j != 0) {
        let m = fam.member(j).ok_or("missing member")?;
        for k in (-4i64..=4).filter(|&k| k != 0) {
            let id = if j == k { 1.0 } else { 0.0 };
            worst = worst.max((fam.pair(m, spec.mode(k).unwrap().lambda) - id).norm());
        }
    }

    let len = 2.0 * PI + 0.02;
    let spec2 = full_spectrum(len, 12).map_err(|e| e.to_string())?;
    let basis = quasi_invariant_basis(&spec2, 2.0 * PI).map_err(|e| e.to_string())?;
    let p = basis.basis_b[0].indices[0].abs();
    let opts = FamilyOptions {
        l0: Some(2.0 * PI),
        compensation: vec![CompensationRequest::S1 { p }],
        ..FamilyOptions::default()
    };
    let fam2 = build_family(&spec2, 2.0, 8, &opts).map_err(|e| e.to_string())?;
    let theta = fam2.compensated_member(&format!("theta_0[{p}]")).ok_or("missing ϑ₀")?;
    let mut comp: f64 = 0.0;
    for &(k, lk) in &fam2.lambda {
        let target = if k.abs() == p { 1.0 } else { 0.0 };
        comp = comp.max((fam2.pair(theta, lk) - target).norm());
    }
    let c1 = match &fam2.compensation[0] {
        kdv_core::biortho::Compensation::S1Pair { c1, .. } => *c1,
        _ => return Err("unexpected compensation kind".into()),
    };
    let secs = start.elapsed().as_secs_f64();
    let ok = worst < 1e-3 && comp < 1e-3 && within(c1, 0.5, 2.0 / 3.0) && secs < 60.0;
    Ok((
        ok,
        format!("pairing defect {worst:.1e}, ϑ₀ defect {comp:.1e}, C1 = {c1:.6}, {secs:.2}s"),
    ))
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let len = 2.0 * PI + 0.3;
    let spec = full_spectrum(len, 30).map_err(|e| e.to_string())?;
    let fam = build_family(&spec, 2.0, 8, &FamilyOptions::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    let mut z0 = SpectralState::zeros(len, 8);
    for j in 1..=4i64 {
        let c = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        z0.coeffs.insert(j, c);
        z0.coeffs.insert(-j, c.conj());
    }
    let cfg = SimConfig::new(2048, 2.0 / 4096.0);
    let run = null_control(&z0, &fam, &spec, &cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let ok = run.max_relative_residual < 1e-3 && run.ratio < 0.05 && secs < 120.0;
    Ok((
        ok,
        format!(
            "moment residual {:.1e}, ‖y(T)‖/‖y⁰‖ = {:.2e}, {secs:.2}s",
            run.max_relative_residual, run.ratio
        ),
    ))
}

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let cfg = DecayConfig {
        n: 1024,
        dt: 2e-3,
        max_steps: 0,
        ..DecayConfig::default()
    };
    let report = decay_sweep(2.0 * PI, &[1e-1, 1e-2, 1e-3], &cfg).map_err(|e| e.to_string())?;
    if !report.failures.is_empty() {
        return Err(format!("sweep failures: {:?}", report.failures));
    }
    let slope = report.obs_exponent.ok_or("no observability exponent")?;
    let var = report.obs_h_variation.ok_or("no hyperbolic variation")?;
    let secs = start.elapsed().as_secs_f64();
    let ok = (slope + 2.0).abs() <= 0.2 && var < 0.3 && secs < 180.0;
    Ok((ok, format!("M-datum slope {slope:.3}, hyperbolic variation {var:.3}, {secs:.2}s")))
}

fn criterion_11() -> Outcome {
    let len = 2.0 * PI;
    let n = 2048;
    let y0 = GridFunction::from_fn(len, n, |x| (1.0 - x.cos()) / (3.0 * PI).sqrt());
    let traj = simulate(&y0, None, 5.0, &SimConfig::new(n, 5.0 / 5000.0)).map_err(|e| e.to_string())?;
    let trace = traj.boundary_trace_dx0.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let e0 = traj.energy[0];
    let drift = traj.energy.iter().fold(0.0f64, |a, e| a.max((e - e0).abs())) / e0;
    Ok((
        trace < 1e-4 && drift < 0.01,
        format!("max |y_x(t,0)| = {trace:.1e}, energy drift {drift:.1e}"),
    ))
}

fn criterion_12() -> Outcome {
    let start = Instant::now();
    let cfg = DecayConfig {
        nonlinear: true,
        amplitude: 0.01,
        ..DecayConfig::default()
    };
    let report = decay_sweep(2.0 * PI, &[0.05, 0.1], &cfg).map_err(|e| e.to_string())?;
    if !report.failures.is_empty() {
        return Err(format!("sweep failures: {:?}", report.failures));
    }
    let spread = report.m_rate_spread.ok_or("no M rates")?;
    let hvar = report.h_rate_variation.ok_or("no H rates")?;
    let secs = start.elapsed().as_secs_f64();
    let rates: Vec<String> = report
        .entries
        .iter()
        .map(|e| format!("{:.3e}", e.m_rate_sim.unwrap_or(f64::NAN) / (e.delta * e.delta)))
        .collect();
    let ok = spread < 0.3 && hvar < 0.2 && secs < 300.0;
    Ok((
        ok,
        format!(
            "M rate/δ² = [{}] (spread {spread:.3}), H variation {hvar:.3}, {secs:.2}s",
            rates.join(", ")
        ),
    ))
}

fn criterion_13() -> Outcome {
    let len = 2.0 * PI + 0.3;
    let spec = full_spectrum(len, 30).map_err(|e| e.to_string())?;
    let mut params = StabilizationParams::new(16.0);
    params.q = 4.0;
    params.dt = 16.0 / 8192.0;
    params.scheme = Scheme::Basic;
    let y0 = GridFunction::from_fn(len, params.n, |x| {
        let s = x * (len - x) / (len * len);
        s * s * (1.0 + (3.0 * x).sin())
    });
    let plan = run_transition_stabilization(&y0, &params, &spec).map_err(|e| e.to_string())?;
    let ratios: Vec<f64> = plan.intervals.iter().map(|i| i.ratio).collect();
    let ok = plan.intervals.len() == 3 && ratios.iter().all(|&r| r < 1.0) && plan.total_ratio < 0.1;
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.2e}")).collect();
    Ok((
        ok,
        format!("interval ratios [{}], total {:.2e}", shown.join(", "), plan.total_ratio),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("classification table", criterion_1),
        ("critical eigenvalues", criterion_2),
        ("ℬ-spectrum integrity", criterion_3),
        ("elliptic perturbation law", criterion_4),
        ("𝒜-spectrum laws", criterion_5),
        ("rotation structure", criterion_6),
        ("modulated functions", criterion_7),
        ("bi-orthogonality", criterion_8),
        ("null control end-to-end", criterion_9),
        ("observability blow-up", criterion_10),
        ("critical-length unobservability", criterion_11),
        ("nonlinear decay dichotomy", criterion_12),
        ("iteration scheme", criterion_13),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (ok, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!("{} criterion {:>2} ({name}): {detail}", if ok { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
