//! Moment-method boundary control.
//!
//! The intermediate ℬ-system `z_t + z_xxx + z_x = 0`, `z(0) = z(L) = 0`,
//! `z_x(L) − z_x(0) = v(t)` is steered by a control `v` built on the
//! bi-orthogonal family. The physical system is reached through the
//! modulated lifts `h_μ`: `y = z + Σ c_j e^{−μ_j t} h_{μ_j}` and
//! `u = z_x(t, L) + Σ c_j e^{−μ_j t} h'_{μ_j}(L)`.

use crate::biortho::{build_family, BiorthogonalFamily, Bump, Compensation, CompensationRequest, FamilyMember, FamilyOptions};
use crate::error::{KdvError, Result};
use crate::modulated::solve_h_mu;
use crate::numerics::{fd_weights, simpson_c, solve_complex, solve_real};
use crate::simulator::{etd_linear, simulate, step_count, GridFunction, SimConfig, SpectralState};
use crate::spectrum_a::{AtomB, EigenmodeA, QuasiInvariantBasis};
use crate::spectrum_b::SpectrumB;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Below this size a boundary slope `ℰ'_j(L)` counts as zero.
const SLOPE_FLOOR: f64 = 1e-13;

/// Largest accepted condition number of the transition systems.
const MAX_CONDITION: f64 = 1e12;

fn mode_checked(spec: &SpectrumB, j: i64) -> Result<&crate::spectrum_b::EigenmodeB> {
    spec.mode(j)
        .ok_or_else(|| KdvError::validation(format!("mode {j} is outside the computed spectrum")))
}

/// `h_j = ⟨h, ℰ_j⟩ = −conj(ℰ'_j(L))/(iλ_j)` for the zero-mode lift `h`.
pub fn lift_coefficient(spec: &SpectrumB, j: i64) -> Result<C64> {
    let m = mode_checked(spec, j)?;
    if m.lambda == 0.0 {
        return Err(KdvError::numerical(format!("λ_{j} = 0: the zero-mode lift is undefined")));
    }
    Ok(-m.de_at_l.conj() / (I * m.lambda))
}

/// `⟨h_μ, ℰ_j⟩ = −conj(ℰ'_j(L))/(μ + iλ_j)`.
pub fn h_mu_inner(spec: &SpectrumB, mu: f64, j: i64) -> Result<C64> {
    let m = mode_checked(spec, j)?;
    Ok(-m.de_at_l.conj() / (mu + I * m.lambda))
}

/// Duality pairing `⟨ℰ_j, ℱ_ζ⟩ = ∫ℰ_j(x) conj(ℱ_ζ(L−x)) dx`
/// `= conj(ℱ'_ζ(0)) ℰ'_j(L) / (conj ζ − iλ_j)`.
pub fn dual_e_f(spec: &SpectrumB, j: i64, f: &EigenmodeA) -> Result<C64> {
    let m = mode_checked(spec, j)?;
    Ok(f.df_at_0.conj() * m.de_at_l / (f.zeta.conj() - I * m.lambda))
}

/// Duality pairing `⟨h_μ, ℱ_ζ⟩ = conj(ℱ'_ζ(0) h'_μ(L) / (ζ + μ))`.
pub fn dual_h_f(h_mu_dl: f64, mu: f64, f: &EigenmodeA) -> C64 {
    (f.df_at_0 * h_mu_dl / (f.zeta + mu)).conj()
}

/// Quadrature projection onto `ℰ_j`, `0 < |j| ≤ spec.jmax`.
pub fn project(f: &GridFunction, spec: &SpectrumB) -> Result<SpectralState> {
    project_upto(f, spec, spec.jmax)
}

/// Quadrature projection onto `ℰ_j`, `0 < |j| ≤ k`. The samples are real, so
/// `z_{−j} = conj(z_j)` is used for negative indices.
pub fn project_upto(f: &GridFunction, spec: &SpectrumB, k: usize) -> Result<SpectralState> {
    if (f.len - spec.len).abs() > 1e-12 * spec.len {
        return Err(KdvError::validation(format!(
            "grid length {} differs from the spectrum's L = {}",
            f.len, spec.len
        )));
    }
    if f.n % 2 != 0 {
        return Err(KdvError::validation("projection needs an even number of grid intervals"));
    }
    let top = mode_checked(spec, k as i64)?;
    let wavelength = 2.0 * std::f64::consts::PI / top.lambda.abs().cbrt().max(1.0);
    let per_wave = wavelength / f.step();
    if per_wave < 8.0 {
        return Err(KdvError::validation(format!(
            "grid under-resolved: {per_wave:.1} points per wavelength at j = {k} (need 8)"
        )));
    }
    let mut out = SpectralState::zeros(spec.len, k);
    for j in 1..=k as i64 {
        let m = mode_checked(spec, j)?;
        let c = f.inner_with(|x| m.eval(x));
        out.coeffs.insert(j, c);
        out.coeffs.insert(-j, c.conj());
    }
    Ok(out)
}

/// `‖f‖² − Σ|z_j|²`.
pub fn parseval_defect(f: &GridFunction, state: &SpectralState) -> f64 {
    f.energy() - state.norm().powi(2)
}

/// One term `coef · member(s − T/2)` of a synthesized control.
#[derive(Clone, Debug, Serialize)]
pub struct ControlTerm {
    pub label: String,
    pub coef: C64,
}

/// A control `v(s) = Re Σ coef_k φ_k(s − T/2)` on `[0, T]`.
#[derive(Clone, Debug, Serialize)]
pub struct ControlSignal {
    #[serde(rename = "T")]
    pub t: f64,
    pub terms: Vec<ControlTerm>,
    /// `max |Im Σ coef φ| / max |Σ coef φ|` on the family grid.
    pub imag_defect: f64,
    /// Moment mismatch left by least-squares fits on compensated pairs,
    /// measured as `(Σ |ℰ'_k(L)|² |π_k a − m_k|²)^{1/2}`.
    pub compensation_defect: f64,
    #[serde(skip)]
    members: Vec<FamilyMember>,
    #[serde(skip)]
    bump: Option<Bump>,
}

impl ControlSignal {
    /// The zero control on `[0, T]`.
    pub fn zero(t: f64) -> Self {
        ControlSignal {
            t,
            terms: Vec::new(),
            imag_defect: 0.0,
            compensation_defect: 0.0,
            members: Vec::new(),
            bump: None,
        }
    }

    /// `(v(s), v'(s), v''(s))`.
    pub fn derivs(&self, s: f64) -> [f64; 3] {
        let Some(bump) = &self.bump else {
            return [0.0; 3];
        };
        let tc = s - 0.5 * self.t;
        let mut out = [0.0; 3];
        for (term, m) in self.terms.iter().zip(&self.members) {
            for (o, d) in out.iter_mut().zip(m.eval_derivs(bump, tc, 2)) {
                *o += (term.coef * d).re;
            }
        }
        out
    }

    pub fn value(&self, s: f64) -> f64 {
        self.derivs(s)[0]
    }

    /// `v`, `v'` and `v''` on `steps + 1` uniform points of `[0, T]`.
    pub fn sample(&self, steps: usize) -> [Vec<f64>; 3] {
        let dt = self.t / steps as f64;
        let mut out: [Vec<f64>; 3] = Default::default();
        for k in 0..=steps {
            for (o, d) in out.iter_mut().zip(self.derivs(k as f64 * dt)) {
                o.push(d);
            }
        }
        out
    }

    /// `max |v|` on the family grid.
    pub fn sup_norm(&self) -> f64 {
        let n = self.members.first().map_or(0, |m| m.samples.len());
        (0..n)
            .map(|i| {
                self.terms
                    .iter()
                    .zip(&self.members)
                    .map(|(t, m)| (t.coef * m.samples[i]).re)
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
    }
}

/// `m_j = (z⁰_j e^{iλ_jT/2} − z^T_j e^{−iλ_jT/2}) / (−conj(ℰ'_j(L)))`, the
/// amplitude that `φ_j` must carry.
fn moment_target(spec: &SpectrumB, j: i64, z0: C64, zt: C64, t: f64) -> Result<C64> {
    let m = mode_checked(spec, j)?;
    let num = z0 * (I * m.lambda * 0.5 * t).exp() - zt * (-I * m.lambda * 0.5 * t).exp();
    if num == C64::new(0.0, 0.0) {
        return Ok(num);
    }
    if m.de_at_l.norm() < SLOPE_FLOOR {
        return Err(KdvError::numerical(format!(
            "uncontrollable direction: ℰ'_{j}(L) = {:.3e} vanishes but the data on mode {j} does not",
            m.de_at_l.norm()
        )));
    }
    Ok(-num / m.de_at_l.conj())
}

fn family_lambda(family: &BiorthogonalFamily, j: i64) -> Result<f64> {
    family
        .lambda
        .iter()
        .find(|e| e.0 == j)
        .map(|e| e.1)
        .ok_or_else(|| KdvError::validation(format!("index {j} is not in the family")))
}

/// Least-squares amplitude of a compensated member that pairs to `π_k` at
/// `λ_k`, fitting the targets `m_k` with weights `|ℰ'_k(L)|²`.
fn fit_amplitude(
    family: &BiorthogonalFamily,
    spec: &SpectrumB,
    member: &FamilyMember,
    targets: &[(i64, C64)],
    real: bool,
) -> Result<(C64, f64)> {
    let mut num = C64::new(0.0, 0.0);
    let mut den = 0.0;
    let mut pis = Vec::new();
    for &(k, mk) in targets {
        let w = mode_checked(spec, k)?.de_at_l.norm_sqr();
        let pk = family.pair(member, family_lambda(family, k)?);
        num += w * pk.conj() * mk;
        den += w * pk.norm_sqr();
        pis.push((w, pk, mk));
    }
    if den == 0.0 {
        return Ok((C64::new(0.0, 0.0), 0.0));
    }
    let mut a = num / den;
    if real {
        a = C64::new(a.re, 0.0);
    }
    let defect = pis.iter().map(|(w, p, m)| w * (p * a - m).norm_sqr()).sum::<f64>().sqrt();
    Ok((a, defect))
}

/// Moment synthesis of `v` steering `z0` to `zT` over the family horizon.
/// Indices covered by a compensated pair are served by the compensated
/// members with least-squares amplitudes (real for an S1 pair).
pub fn synthesize_v(
    z0: &SpectralState,
    zt: &SpectralState,
    family: &BiorthogonalFamily,
    spec: &SpectrumB,
) -> Result<ControlSignal> {
    if (z0.len - spec.len).abs() > 1e-12 * spec.len {
        return Err(KdvError::validation("initial state and spectrum have different L"));
    }
    let t = family.t;
    let mut covered = BTreeSet::new();
    for comp in &family.compensation {
        match comp {
            Compensation::S1Pair { indices, .. } => covered.extend(indices.iter().copied()),
            Compensation::S2Pair { indices, .. } => {
                covered.extend(indices.iter().copied());
                covered.extend(indices.iter().map(|j| -j));
            }
        }
    }
    for (&j, &c) in z0.coeffs.iter().chain(&zt.coeffs) {
        if c != C64::new(0.0, 0.0) && j.unsigned_abs() as usize > family.k_trunc {
            return Err(KdvError::validation(format!(
                "data on mode {j} lies beyond the family's K_trunc = {}",
                family.k_trunc
            )));
        }
    }
    let mut terms = Vec::new();
    let mut members = Vec::new();
    for member in &family.members {
        let j = member.components[0].anchor;
        if covered.contains(&j) {
            continue;
        }
        let m = moment_target(spec, j, z0.get(j), zt.get(j), t)?;
        if m != C64::new(0.0, 0.0) {
            terms.push(ControlTerm {
                label: member.label.clone(),
                coef: m,
            });
            members.push(member.clone());
        }
    }
    let mut defect_sq = 0.0;
    let target = |j: i64| moment_target(spec, j, z0.get(j), zt.get(j), t).map(|m| (j, m));
    for comp in &family.compensation {
        let mut push = |label: String, real: bool, idx: &[i64]| -> Result<C64> {
            let member = family
                .compensated_member(&label)
                .ok_or_else(|| KdvError::numerical(format!("compensated member {label} missing")))?;
            let targets = idx.iter().map(|&j| target(j)).collect::<Result<Vec<_>>>()?;
            let (a, d) = fit_amplitude(family, spec, member, &targets, real)?;
            defect_sq += d * d;
            if a != C64::new(0.0, 0.0) {
                terms.push(ControlTerm { label, coef: a });
                members.push(member.clone());
            }
            Ok(a)
        };
        match *comp {
            Compensation::S1Pair { indices, .. } => {
                push(format!("theta_0[{}]", indices[0]), true, &indices)?;
            }
            Compensation::S2Pair { indices: [p, q], .. } => {
                push(format!("theta_plus[{p},{q}]"), false, &[p, q])?;
                push(format!("theta_minus[{p},{q}]"), false, &[-p, -q])?;
            }
        }
    }
    let n = members.first().map_or(0, |m| m.samples.len());
    let (mut re_max, mut im_max) = (0.0f64, 0.0f64);
    for i in 0..n {
        let s: C64 = terms.iter().zip(&members).map(|(t, m)| t.coef * m.samples[i]).sum();
        re_max = re_max.max(s.norm());
        im_max = im_max.max(s.im.abs());
    }
    Ok(ControlSignal {
        t,
        terms,
        imag_defect: if re_max > 0.0 { im_max / re_max } else { 0.0 },
        compensation_defect: defect_sq.sqrt(),
        members,
        bump: Some(family.bump.clone()),
    })
}

/// `r_j = z⁰_j e^{iλ_jT} − z^T_j + conj(ℰ'_j(L)) e^{iλ_jT} ∫₀^T e^{−iλ_js} v(s) ds`
/// by Simpson's rule on uniform samples of `v` (an even number of intervals).
pub fn moment_residuals(
    v_samples: &[f64],
    t: f64,
    spec: &SpectrumB,
    z0: &SpectralState,
    zt: &SpectralState,
) -> Result<BTreeMap<i64, C64>> {
    if v_samples.len() < 3 || v_samples.len() % 2 == 0 {
        return Err(KdvError::validation("moment quadrature needs an odd number (≥ 3) of samples"));
    }
    let n = v_samples.len() - 1;
    let h = t / n as f64;
    let mut out = BTreeMap::new();
    for &j in z0.coeffs.keys() {
        let m = mode_checked(spec, j)?;
        let rot = (I * m.lambda * t).exp();
        let vals: Vec<C64> = v_samples
            .iter()
            .enumerate()
            .map(|(k, &v)| v * (-I * m.lambda * (k as f64 * h)).exp())
            .collect();
        let integral = simpson_c(&vals, h);
        out.insert(j, z0.get(j) * rot - zt.get(j) + m.de_at_l.conj() * rot * integral);
    }
    Ok(out)
}

/// Modal run of the ℬ-system through the lift `z = z̃ + v·h`.
#[derive(Clone, Debug, Serialize)]
pub struct ZRun {
    #[serde(rename = "T")]
    pub t: f64,
    pub times: Vec<f64>,
    pub v: Vec<f64>,
    /// `z_x(t, L)` from the term-by-term differentiated series.
    pub dxl: Vec<f64>,
    /// `z(T)` (equal to `z̃(T)` because `v(T) = 0`).
    pub final_state: SpectralState,
}

/// `(ℬ⁻¹h)'(L) = Σ_j |ℰ'_j(L)|²/λ_j²` for the zero-mode lift `h`, where
/// `ℬ = −∂ₓ³ − ∂ₓ` on `{g(0) = g(L) = 0, g'(0) = g'(L)}`.
pub fn lift_resolvent_slope(len: f64) -> Result<f64> {
    let s = (0.5 * len).sin();
    if s.abs() < 1e-8 {
        return Err(KdvError::validation(format!(
            "L = {len} is too close to a multiple of 2π for the zero-mode lift"
        )));
    }
    let a = (0.5 * len).cos() / (2.0 * s);
    // Particular solution of g''' + g' = −h, plus c₀ + c₁ cos x + c₂ sin x.
    let gp = |x: f64| -a * x - x * (x - 0.5 * len).cos() / (4.0 * s);
    let dgp = |x: f64| -a - (x - 0.5 * len).cos() / (4.0 * s) + x * (x - 0.5 * len).sin() / (4.0 * s);
    let (cl, sl) = (len.cos(), len.sin());
    let m = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, cl, sl, 0.0, -sl, cl - 1.0]);
    let b = DVector::from_vec(vec![-gp(0.0), -gp(len), dgp(0.0) - dgp(len)]);
    let (c, _) = solve_real(&m, &b)?;
    Ok(dgp(len) - c[1] * sl + c[2] * cl)
}

/// Integrates the lifted system `z̃_j' = iλ_j z̃_j − h_j v'(t)` mode by mode
/// on `steps` uniform steps, exactly for piecewise-linear `v'`. For modes
/// beyond `jmax` the response is quasi-static, `z̃_j ≈ h_j v'/(iλ_j)`, and
/// their summed contribution `v'(t) Σ_{|j|>jmax} |ℰ'_j(L)|²/λ_j²` is added to
/// the trace using the closed form of the full sum.
pub fn run_z_system(z0: &SpectralState, v: &ControlSignal, spec: &SpectrumB, steps: usize) -> Result<ZRun> {
    if steps == 0 {
        return Err(KdvError::validation("the z-run needs at least one step"));
    }
    let t = v.t;
    let dt = t / steps as f64;
    let [vs, dvs, _] = v.sample(steps);
    let resolved: f64 = spec
        .modes
        .iter()
        .filter(|m| m.index != 0 && m.lambda != 0.0)
        .map(|m| m.de_at_l.norm_sqr() / (m.lambda * m.lambda))
        .sum();
    let tail = lift_resolvent_slope(spec.len)? - resolved;
    let mut dxl: Vec<f64> = vs.iter().zip(&dvs).map(|(x, dx)| 0.5 * x + tail * dx).collect();
    let mut final_state = z0.clone();
    for m in spec.modes.iter().filter(|m| m.index != 0) {
        final_state.coeffs.entry(m.index).or_default();
    }
    for (&j, c) in final_state.coeffs.iter_mut() {
        let m = mode_checked(spec, j)?;
        let hj = lift_coefficient(spec, j)?;
        let path = etd_linear(*c - vs[0] * hj, m.lambda, -hj, &dvs, dt);
        for (acc, w) in dxl.iter_mut().zip(&path) {
            *acc += (w * m.de_at_l).re;
        }
        *c = *path.last().expect("non-empty path") + vs[steps] * hj;
    }
    Ok(ZRun {
        t,
        times: (0..=steps).map(|k| k as f64 * dt).collect(),
        v: vs,
        dxl,
        final_state,
    })
}

/// A boundary control sampled on a uniform grid starting at `t0`, zero
/// before `t0` and linearly interpolated in between samples.
#[derive(Clone, Debug, Serialize)]
pub struct SampledControl {
    pub t0: f64,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl SampledControl {
    pub fn at(&self, t: f64) -> f64 {
        let s = (t - self.t0) / self.dt;
        if s < -1e-9 || self.values.is_empty() {
            return 0.0;
        }
        let s = s.max(0.0);
        let k = s.floor() as usize;
        if k + 1 >= self.values.len() {
            return *self.values.last().expect("non-empty");
        }
        let f = s - k as f64;
        self.values[k] * (1.0 - f) + self.values[k + 1] * f
    }

    /// `(t, u(t))` for every sample.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.values
            .iter()
            .enumerate()
            .map(|(k, &u)| (self.t0 + k as f64 * self.dt, u))
            .collect()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// `u(t) = 0` on `[0, half_shift)` and `u = z_x(t, L) + Σ c_j e^{−μ_j(t−half_shift)} h'_{μ_j}(L)`
/// afterwards.
pub fn assemble_u(run: &ZRun, coeffs: Option<&TransitionCoeffs>, half_shift: f64) -> Result<SampledControl> {
    let mut values = run.dxl.clone();
    if let Some(tc) = coeffs {
        for (&c, &mu) in tc.c.iter().zip(&tc.mu) {
            let slope = solve_h_mu(mu, run.final_state.len)?.deriv(run.final_state.len, 1);
            for (u, &s) in values.iter_mut().zip(&run.times) {
                *u += c * (-mu * s).exp() * slope;
            }
        }
    }
    let dt = if run.times.len() > 1 { run.times[1] - run.times[0] } else { run.t };
    Ok(SampledControl {
        t0: half_shift,
        dt,
        values,
    })
}

/// Which rows the transition `𝒯_c` imposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TransitionVariant {
    /// Boundary compatibility only (two modulated functions).
    #[serde(rename = "basic2")]
    Basic2,
    /// Boundary rows plus orthogonality to one real atom (three functions).
    #[serde(rename = "s1_3")]
    S1_3,
    /// Boundary rows plus orthogonality to one complex atom (four functions).
    #[serde(rename = "general4")]
    General4,
    /// Boundary rows plus every atom of `M_ℬ` (`N₀ + 2` functions).
    #[serde(rename = "general")]
    General,
}

impl TransitionVariant {
    /// The refined variant that matches the atoms of `basis`.
    pub fn refined_for(basis: &QuasiInvariantBasis) -> Self {
        match atom_rows(basis).iter().map(|g| g.rows()).sum::<usize>() {
            1 => TransitionVariant::S1_3,
            2 if atom_rows(basis).len() == 1 => TransitionVariant::General4,
            _ => TransitionVariant::General,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TransitionVariant::Basic2 => "basic2",
            TransitionVariant::S1_3 => "s1_3",
            TransitionVariant::General4 => "general4",
            TransitionVariant::General => "general",
        }
    }
}

/// An atom constraint: real atoms give one row, complex atoms (taken once per
/// conjugate pair) give two.
struct AtomGroup<'a> {
    atom: &'a AtomB,
    real: bool,
}

impl AtomGroup<'_> {
    fn rows(&self) -> usize {
        if self.real {
            1
        } else {
            2
        }
    }
}

fn atom_rows(basis: &QuasiInvariantBasis) -> Vec<AtomGroup<'_>> {
    let mut out: Vec<AtomGroup> = Vec::new();
    for atom in &basis.basis_b {
        let real = atom.indices.contains(&-atom.indices[0]);
        let negated: Vec<i64> = atom.indices.iter().map(|j| -j).collect();
        if !real && out.iter().any(|g| g.atom.indices == negated) {
            continue;
        }
        out.push(AtomGroup { atom, real });
    }
    out
}

/// `y_x(0)` and `(𝒫y)_x(0)` with `𝒫 = ∂ₓ³ + ∂ₓ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundaryData {
    pub dx0: f64,
    pub dp_dx0: f64,
}

impl BoundaryData {
    /// Seven-point one-sided differences at `x = 0`.
    pub fn from_grid(y: &GridFunction) -> Result<Self> {
        if y.n < 8 {
            return Err(KdvError::validation("grid too coarse for boundary differences"));
        }
        let xs: Vec<f64> = (0..7).map(|i| y.x(i)).collect();
        let w = fd_weights(0.0, &xs, 4);
        let d = |k: usize| -> f64 { w[k].iter().zip(&y.values).map(|(a, b)| a * b).sum() };
        Ok(BoundaryData {
            dx0: d(1),
            dp_dx0: d(4) + d(2),
        })
    }

    /// From a free-flow trace of `y_x(t, 0)` sampled with step `dt`: along the
    /// flow `y_t = −𝒫y`, so `(𝒫y)_x(0) = −d/dt y_x(t, 0)`.
    pub fn from_trace(trace: &[f64], dt: f64) -> Result<Self> {
        let n = trace.len();
        if n < 3 {
            return Err(KdvError::validation("trace too short for a time derivative"));
        }
        let d = (3.0 * trace[n - 1] - 4.0 * trace[n - 2] + trace[n - 3]) / (2.0 * dt);
        Ok(BoundaryData {
            dx0: trace[n - 1],
            dp_dx0: -d,
        })
    }
}

/// Coefficients of the transition `z⁰ = y − Σ c_j h_{μ_j}` and the targets `ϱ`.
#[derive(Clone, Debug, Serialize)]
pub struct TransitionCoeffs {
    pub variant: TransitionVariant,
    pub c: Vec<f64>,
    pub mu: Vec<f64>,
    pub rho: Vec<C64>,
    /// Largest row residual of the solved system.
    pub residual: f64,
    pub condition: f64,
}

/// Solves `𝒯_c`: `Σ c_j = −y_x(0)`, `Σ μ_j c_j = −(𝒫y)_x(0)`, and
/// `Σ c_j ⟨h_{μ_j}, A⟩ = ⟨y, A⟩` (real and imaginary parts) for each atom `A`
/// that the variant includes.
pub fn transition_tc(
    y_half: &GridFunction,
    data: BoundaryData,
    variant: TransitionVariant,
    mus: &[f64],
    spec: &SpectrumB,
    basis: Option<&QuasiInvariantBasis>,
) -> Result<TransitionCoeffs> {
    let groups = match (variant, basis) {
        (TransitionVariant::Basic2, _) => Vec::new(),
        (_, Some(b)) => atom_rows(b),
        (_, None) => {
            return Err(KdvError::validation(format!(
                "variant {} needs a quasi-invariant basis",
                variant.name()
            )))
        }
    };
    let n_rows = 2 + groups.iter().map(|g| g.rows()).sum::<usize>();
    let expected = match variant {
        TransitionVariant::Basic2 => Some(2),
        TransitionVariant::S1_3 => Some(3),
        TransitionVariant::General4 => Some(4),
        TransitionVariant::General => None,
    };
    if let Some(e) = expected {
        if e != n_rows {
            return Err(KdvError::validation(format!(
                "variant {} needs {e} rows but the basis gives {n_rows}",
                variant.name()
            )));
        }
    }
    if mus.len() != n_rows {
        return Err(KdvError::validation(format!(
            "variant {} needs {n_rows} modulation parameters, got {}",
            variant.name(),
            mus.len()
        )));
    }
    for (i, &m) in mus.iter().enumerate() {
        if !(m > 0.0) || !m.is_finite() {
            return Err(KdvError::validation(format!("μ must be positive, got {m}")));
        }
        if mus[..i].iter().any(|&o| (o - m).abs() <= 1e-12 * m) {
            return Err(KdvError::validation(format!("μ values must be distinct ({m} repeats)")));
        }
    }
    let mut a = DMatrix::<f64>::zeros(n_rows, n_rows);
    let mut b = DVector::<f64>::zeros(n_rows);
    for (k, &mu) in mus.iter().enumerate() {
        a[(0, k)] = 1.0;
        a[(1, k)] = mu;
    }
    b[0] = -data.dx0;
    b[1] = -data.dp_dx0;
    let mut row = 2;
    for g in &groups {
        let proj = y_half.inner_with(|x| g.atom.func.eval(x));
        for (k, &mu) in mus.iter().enumerate() {
            let mut s = C64::new(0.0, 0.0);
            for (&j, &aj) in g.atom.indices.iter().zip(&g.atom.coefs) {
                s += aj.conj() * h_mu_inner(spec, mu, j)?;
            }
            a[(row, k)] = s.re;
            if !g.real {
                a[(row + 1, k)] = s.im;
            }
        }
        b[row] = proj.re;
        if !g.real {
            b[row + 1] = proj.im;
        }
        row += g.rows();
    }
    let (c, cond) = solve_real(&a, &b)?;
    if cond > MAX_CONDITION {
        return Err(KdvError::numerical(format!(
            "transition system is singular (condition number {cond:.3e})"
        )));
    }
    let residual = (&a * &c - &b).amax();
    Ok(TransitionCoeffs {
        variant,
        c: c.iter().copied().collect(),
        mu: mus.to_vec(),
        rho: Vec::new(),
        residual,
        condition: cond,
    })
}

/// The final target `z^T` of a refined transition and its amplitudes `ϱ`.
#[derive(Clone, Debug, Serialize)]
pub struct TransitionTarget {
    pub rho: Vec<C64>,
    pub target: SpectralState,
    pub condition: f64,
}

/// Unit-norm direction (coefficients on `ℰ_k`) that carries the target for one
/// atom group: `ℰ_p − ℰ_{−p}` for a real atom, the combination orthogonal to
/// the atom inside its span for a complex two-index atom, and the nearest free
/// ℬ mode for a one-index atom.
fn target_direction(g: &AtomGroup, spec: &SpectrumB, used: &BTreeSet<i64>) -> Result<Vec<(i64, C64)>> {
    let idx = &g.atom.indices;
    let s2 = std::f64::consts::FRAC_1_SQRT_2;
    if g.real {
        let p = idx[0].abs();
        return Ok(vec![(p, C64::new(s2, 0.0)), (-p, C64::new(-s2, 0.0))]);
    }
    if idx.len() >= 2 {
        let (ap, aq) = (g.atom.coefs[0], g.atom.coefs[1]);
        let nrm = (ap.norm_sqr() + aq.norm_sqr()).sqrt();
        return Ok(vec![(idx[0], -aq.conj() / nrm), (idx[1], ap.conj() / nrm)]);
    }
    let lj = mode_checked(spec, idx[0])?.lambda;
    let s = spec
        .modes
        .iter()
        .filter(|m| m.index.signum() == idx[0].signum() && !used.contains(&m.index))
        .min_by(|a, b| (a.lambda - lj).abs().partial_cmp(&(b.lambda - lj).abs()).expect("finite"))
        .map(|m| m.index)
        .ok_or_else(|| KdvError::numerical("no free ℬ mode for the target direction"))?;
    Ok(vec![(s, C64::new(1.0, 0.0))])
}

/// Solves `𝒯_ϱ`: chooses the amplitudes on the target directions so that
/// `z^T + Σ c_j e^{−μ_j T} h_{μ_j}` pairs to zero with every `ℱ_ζ` of `M_𝒜`.
/// Modes of `free` are not steered by the control; they rotate freely and
/// their pairing at time `t` enters the right-hand side.
/// `ϱ` is purely imaginary for a real atom and comes as a conjugate pair
/// `(ϱ, conj ϱ)` for a complex one.
pub fn transition_trho(
    coeffs: &TransitionCoeffs,
    basis: &QuasiInvariantBasis,
    spec: &SpectrumB,
    t: f64,
    free: Option<&SpectralState>,
) -> Result<TransitionTarget> {
    let groups = atom_rows(basis);
    let used: BTreeSet<i64> = basis.basis_b.iter().flat_map(|a| a.indices.iter().copied()).collect();
    // Unknown real parameters, each with the function it multiplies.
    let mut unknowns: Vec<Vec<(i64, C64)>> = Vec::new();
    let mut dirs = Vec::new();
    for g in &groups {
        let d = target_direction(g, spec, &used)?;
        if g.real {
            unknowns.push(d.iter().map(|&(k, c)| (k, I * c)).collect());
        } else {
            let mirror = |f: C64| -> Vec<(i64, C64)> {
                d.iter()
                    .flat_map(|&(k, c)| [(k, f * c), (-k, (f * c).conj())])
                    .collect()
            };
            unknowns.push(mirror(C64::new(1.0, 0.0)));
            unknowns.push(mirror(I));
        }
        dirs.push(d);
    }
    // Equations: one real row per real ζ, Re and Im rows per conjugate pair.
    let mut eqs: Vec<(&EigenmodeA, bool)> = Vec::new();
    for f in &basis.basis_a {
        let real = f.zeta.im.abs() <= 1e-9 * (1.0 + f.zeta.norm());
        if !real && eqs.iter().any(|(g, _)| (g.zeta - f.zeta.conj()).norm() <= 1e-9 * (1.0 + f.zeta.norm())) {
            continue;
        }
        eqs.push((f, real));
    }
    let n_rows: usize = eqs.iter().map(|e| if e.1 { 1 } else { 2 }).sum();
    if n_rows != unknowns.len() {
        return Err(KdvError::numerical(format!(
            "{n_rows} 𝒜-conditions but {} target parameters",
            unknowns.len()
        )));
    }
    let mut slopes = Vec::new();
    for &mu in &coeffs.mu {
        slopes.push(solve_h_mu(mu, spec.len)?.deriv(spec.len, 1));
    }
    let mut a = DMatrix::<f64>::zeros(n_rows, n_rows);
    let mut b = DVector::<f64>::zeros(n_rows);
    let mut row = 0;
    for (f, real) in &eqs {
        let mut rhs = C64::new(0.0, 0.0);
        for ((&c, &mu), &sl) in coeffs.c.iter().zip(&coeffs.mu).zip(&slopes) {
            rhs -= c * (-mu * t).exp() * dual_h_f(sl, mu, f);
        }
        if let Some(z) = free {
            for (&j, &zj) in &z.coeffs {
                let lj = mode_checked(spec, j)?.lambda;
                rhs -= zj * C64::from_polar(1.0, lj * t) * dual_e_f(spec, j, f)?;
            }
        }
        for (col, u) in unknowns.iter().enumerate() {
            let mut s = C64::new(0.0, 0.0);
            for &(k, ck) in u {
                s += ck * dual_e_f(spec, k, f)?;
            }
            a[(row, col)] = s.re;
            if !real {
                a[(row + 1, col)] = s.im;
            }
        }
        b[row] = rhs.re;
        if !real {
            b[row + 1] = rhs.im;
        }
        row += if *real { 1 } else { 2 };
    }
    let (x, cond) = solve_real(&a, &b)?;
    if cond > MAX_CONDITION {
        return Err(KdvError::numerical(format!(
            "target system is singular (condition number {cond:.3e})"
        )));
    }
    let kmax = spec.jmax;
    let mut target = SpectralState::zeros(spec.len, kmax);
    let mut rho = Vec::new();
    let mut col = 0;
    for (g, d) in groups.iter().zip(&dirs) {
        let r = if g.real {
            let r = I * x[col];
            col += 1;
            for &(k, c) in d {
                *target.coeffs.entry(k).or_default() += r * c;
            }
            rho.push(r);
            continue;
        } else {
            let r = C64::new(x[col], x[col + 1]);
            col += 2;
            r
        };
        for &(k, c) in d {
            *target.coeffs.entry(k).or_default() += r * c;
            *target.coeffs.entry(-k).or_default() += (r * c).conj();
        }
        rho.push(r);
        rho.push(r.conj());
    }
    Ok(TransitionTarget {
        rho,
        target,
        condition: cond,
    })
}

/// `max_ζ |⟨y, ℱ_ζ⟩| / ‖y‖` under the duality pairing; zero for `y = 0`.
pub fn h_a_defect(y: &GridFunction, basis: &QuasiInvariantBasis) -> f64 {
    let nrm = y.norm();
    if nrm == 0.0 {
        return 0.0;
    }
    basis
        .basis_a
        .iter()
        .map(|f| y.dual_with(|x| f.eval(x)).norm() / (nrm * f.func.norm()))
        .fold(0.0, f64::max)
}

/// Coefficients `a_n` with `⟨y − Σ a_n ℱ_n, ℱ_m⟩ = 0` for every mode of `M_𝒜`.
pub fn m_a_coefficients(y: &GridFunction, basis: &QuasiInvariantBasis) -> Result<Vec<C64>> {
    let modes = &basis.basis_a;
    let n = modes.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let gram = DMatrix::from_fn(n, n, |m, k| modes[k].func.dual_pair(&modes[m].func));
    let rhs = DVector::from_fn(n, |m, _| y.dual_with(|x| modes[m].eval(x)));
    let (a, _) = solve_complex(&gram, &rhs)?;
    Ok(a.iter().copied().collect())
}

/// Removes the `M_𝒜` component: `y − Re Σ a_n ℱ_n` with the coefficients of
/// [`m_a_coefficients`].
pub fn project_h_a(y: &GridFunction, basis: &QuasiInvariantBasis) -> Result<GridFunction> {
    let a = m_a_coefficients(y, basis)?;
    let mut out = y.clone();
    for (i, v) in out.values.iter_mut().enumerate() {
        let x = y.x(i);
        let corr: C64 = basis.basis_a.iter().zip(&a).map(|(f, &c)| c * f.eval(x)).sum();
        *v -= corr.re;
    }
    Ok(out)
}

/// One dyadic interval `[T_{n−1}, T_n]` of the iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntervalSchedule {
    pub index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub mu1: f64,
}

/// `T_n = T(1 − 2^{−n})` and `μ_{1,n} = Q·2^{3(n₀+n)/2}` for `n = 1..=n_max`.
pub fn iteration_schedule(t: f64, q: f64, n0: i32, n_max: usize) -> Result<Vec<IntervalSchedule>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(KdvError::validation(format!("T must be positive, got {t}")));
    }
    if !(q > 0.0) || !q.is_finite() {
        return Err(KdvError::validation(format!("Q must be positive, got {q}")));
    }
    if n_max == 0 {
        return Err(KdvError::validation("the iteration needs at least one interval"));
    }
    Ok((1..=n_max)
        .map(|n| IntervalSchedule {
            index: n,
            t_start: t * (1.0 - 0.5f64.powi(n as i32 - 1)),
            t_end: t * (1.0 - 0.5f64.powi(n as i32)),
            mu1: q * 2f64.powf(1.5 * (n0 as f64 + n as f64)),
        })
        .collect())
}

/// Basic scheme: boundary rows only. Refined: also the atoms of `M_ℬ`,
/// compensated families, and `𝒯_ϱ` targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Basic,
    Refined,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilizationParams {
    #[serde(rename = "T")]
    pub t: f64,
    #[serde(rename = "Q")]
    pub q: f64,
    pub n0: i32,
    pub n_max: usize,
    #[serde(rename = "K_trunc")]
    pub k_trunc: usize,
    pub jmax: usize,
    pub n: usize,
    pub dt: f64,
    pub scheme: Scheme,
    #[serde(rename = "L0")]
    pub l0: Option<f64>,
    pub delta: f64,
}

impl StabilizationParams {
    pub fn new(t: f64) -> Self {
        StabilizationParams {
            t,
            q: 4.0,
            n0: 0,
            n_max: 3,
            k_trunc: 8,
            jmax: 30,
            n: 2048,
            dt: t / 4096.0,
            scheme: Scheme::Basic,
            l0: None,
            delta: crate::biortho::DEFAULT_DELTA,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IntervalReport {
    #[serde(flatten)]
    pub schedule: IntervalSchedule,
    pub transition: TransitionCoeffs,
    pub energy_start: f64,
    pub energy_end: f64,
    /// `‖y(T_n)‖ / ‖y(T_{n−1})‖`.
    pub ratio: f64,
    /// `max_{|j| ≤ K_check} |r_j| / ‖z⁰‖`.
    pub moment_residual: f64,
    pub family_tolerance: f64,
    /// `H_𝒜` defects of `y(T_{n−1})` and `y(T_n)` (refined scheme).
    pub h_a_defect: Option<(f64, f64)>,
    pub v_sup: f64,
    pub u: SampledControl,
}

#[derive(Clone, Debug, Serialize)]
pub struct ControlPlan {
    #[serde(rename = "T")]
    pub t: f64,
    pub n0: i32,
    #[serde(rename = "Q")]
    pub q: f64,
    pub scheme: Scheme,
    pub intervals: Vec<IntervalReport>,
    /// `‖y(T_{n_max})‖ / ‖y⁰‖`.
    pub total_ratio: f64,
    #[serde(skip)]
    pub final_state: GridFunction,
}

/// Compensation requests matching the atoms of `M_ℬ`.
pub fn compensation_for(basis: &QuasiInvariantBasis) -> Vec<CompensationRequest> {
    atom_rows(basis)
        .iter()
        .filter_map(|g| {
            let idx = &g.atom.indices;
            if g.real {
                Some(CompensationRequest::S1 { p: idx[0].abs() })
            } else if idx.len() == 2 && idx[0] > 0 && idx[1] > 0 {
                Some(CompensationRequest::S2 { p: idx[0], q: idx[1] })
            } else {
                None
            }
        })
        .collect()
}

/// `K_check = K_trunc − 2`, at least 1.
pub fn k_check(k_trunc: usize) -> usize {
    k_trunc.saturating_sub(2).max(1)
}

/// Even sample count for the moment check: at least `steps`, and fine enough
/// that `|λ_j| h ≤ 0.05` on the modes `z` carries, capped at 2²⁰.
pub fn residual_samples(steps: usize, t: f64, spec: &SpectrumB, z: &SpectralState) -> usize {
    let lam = z
        .coeffs
        .keys()
        .filter_map(|&j| spec.mode(j))
        .map(|m| m.lambda.abs())
        .fold(0.0, f64::max);
    let want = ((lam * t / 0.05).ceil() as usize).clamp(steps, 1 << 20);
    want + want % 2
}

fn max_residual(res: &BTreeMap<i64, C64>, kc: usize) -> f64 {
    res.iter()
        .filter(|(j, _)| j.unsigned_abs() as usize <= kc)
        .map(|(_, r)| r.norm())
        .fold(0.0, f64::max)
}

/// Outcome of steering the ℬ-system to zero and replaying the control on the
/// physical system.
#[derive(Clone, Debug, Serialize)]
pub struct NullControlRun {
    pub v: ControlSignal,
    pub residuals: BTreeMap<i64, C64>,
    /// `max_{|j| ≤ K_check} |r_j| / ‖z⁰‖`.
    pub max_relative_residual: f64,
    pub z_final_norm: f64,
    pub u: SampledControl,
    pub energy_start: f64,
    pub energy_end: f64,
    /// `‖y(T)‖ / ‖y⁰‖` from the finite-difference run.
    pub ratio: f64,
}

/// Null control of `y⁰ = Σ z⁰_j ℰ_j`: moment synthesis, modal run, boundary
/// trace, then the finite-difference replay with `y_x(t, L) = u(t)`.
pub fn null_control(
    z0: &SpectralState,
    family: &BiorthogonalFamily,
    spec: &SpectrumB,
    cfg: &SimConfig,
) -> Result<NullControlRun> {
    let t = family.t;
    let zt = SpectralState::zeros(spec.len, z0.k_trunc);
    let v = synthesize_v(z0, &zt, family, spec)?;
    let (steps, _) = step_count(t, cfg.dt)?;
    let steps = steps + steps % 2;
    let [vs, _, _] = v.sample(residual_samples(steps, t, spec, z0));
    let residuals = moment_residuals(&vs, t, spec, z0, &zt)?;
    let nz = z0.norm();
    let kc = k_check(family.k_trunc);
    let rel = if nz > 0.0 { max_residual(&residuals, kc) / nz } else { 0.0 };
    let mut full = SpectralState::zeros(spec.len, spec.jmax);
    for (&j, &c) in &z0.coeffs {
        full.coeffs.insert(j, c);
    }
    let run = run_z_system(&full, &v, spec, steps)?;
    let u = assemble_u(&run, None, 0.0)?;
    let y0 = z0.to_grid(spec, cfg.n)?;
    let sim_cfg = SimConfig {
        dt: t / steps as f64,
        ..cfg.clone()
    };
    let ufun = |s: f64| u.at(s);
    let traj = simulate(&y0, Some(&ufun), t, &sim_cfg)?;
    let e0 = traj.energy[0];
    let e1 = *traj.energy.last().expect("non-empty");
    Ok(NullControlRun {
        v,
        residuals,
        max_relative_residual: rel,
        z_final_norm: run.final_state.norm(),
        u,
        energy_start: e0,
        energy_end: e1,
        ratio: if e0 > 0.0 { (e1 / e0).sqrt() } else { 0.0 },
    })
}

/// The dyadic transition-stabilization iteration on `[0, T)`: per interval a
/// free half, the transition `𝒯_c`, moment control of the ℬ-system on the
/// second half (with `𝒯_ϱ` targets in the refined scheme), and the replay of
/// `u` on the physical system.
pub fn run_transition_stabilization(
    y0: &GridFunction,
    params: &StabilizationParams,
    spec: &SpectrumB,
) -> Result<ControlPlan> {
    let len = spec.len;
    if (y0.len - len).abs() > 1e-12 * len {
        return Err(KdvError::validation("initial state and spectrum have different L"));
    }
    if params.k_trunc > spec.jmax {
        return Err(KdvError::validation(format!(
            "K_trunc = {} exceeds jmax = {}",
            params.k_trunc, spec.jmax
        )));
    }
    let schedule = iteration_schedule(params.t, params.q, params.n0, params.n_max)?;
    let basis = match params.scheme {
        Scheme::Basic => None,
        Scheme::Refined => {
            let l0 = params
                .l0
                .ok_or_else(|| KdvError::validation("the refined scheme needs L0"))?;
            Some(crate::spectrum_a::quasi_invariant_basis(spec, l0)?)
        }
    };
    let variant = match &basis {
        None => TransitionVariant::Basic2,
        Some(b) => TransitionVariant::refined_for(b),
    };
    let cfg = SimConfig::new(params.n, params.dt);
    let mut y = y0.clone();
    if let Some(b) = &basis {
        y = project_h_a(&y, b)?;
    }
    let e_initial = y.energy();
    let mut intervals = Vec::new();
    for iv in &schedule {
        let wrap = |e: KdvError| -> KdvError {
            match e {
                KdvError::Validation(m) => KdvError::validation(format!("interval {}: {m}", iv.index)),
                KdvError::Numerical(m) => KdvError::numerical(format!("interval {}: {m}", iv.index)),
            }
        };
        let step = || -> Result<(IntervalReport, GridFunction)> {
            let half = 0.5 * (iv.t_end - iv.t_start);
            let e_start = y.energy();
            let free = simulate(&y, None, half, &cfg)?;
            let y_half = free.final_state().clone();
            let (steps, dt) = step_count(half, cfg.dt)?;
            let data = BoundaryData::from_trace(&free.boundary_trace_dx0, dt)?;
            let rows = match variant {
                TransitionVariant::Basic2 => 2,
                _ => 2 + atom_rows(basis.as_ref().expect("refined has a basis"))
                    .iter()
                    .map(|g| g.rows())
                    .sum::<usize>(),
            };
            let mus: Vec<f64> = (1..=rows).map(|k| k as f64 * iv.mu1).collect();
            let mut tc = transition_tc(&y_half, data, variant, &mus, spec, basis.as_ref())?;
            let mut z0_grid = y_half.clone();
            for (&c, &mu) in tc.c.iter().zip(&tc.mu) {
                let h = solve_h_mu(mu, len)?;
                for (i, v) in z0_grid.values.iter_mut().enumerate() {
                    *v -= c * h.value(i as f64 * len / cfg.n as f64);
                }
            }
            let z0 = project(&z0_grid, spec)?;
            let mut zt = SpectralState::zeros(len, spec.jmax);
            let mut options = FamilyOptions {
                delta: params.delta,
                l0: params.l0,
                compensation: Vec::new(),
            };
            if let Some(b) = &basis {
                let mut free = SpectralState::zeros(len, 0);
                free.coeffs = z0
                    .coeffs
                    .iter()
                    .filter(|(j, _)| j.unsigned_abs() as usize > params.k_trunc)
                    .map(|(&j, &c)| (j, c))
                    .collect();
                let target = transition_trho(&tc, b, spec, half, Some(&free))?;
                tc.rho = target.rho.clone();
                zt = target.target;
                options.compensation = compensation_for(b);
            }
            let family = build_family(spec, half, params.k_trunc, &options)?;
            let mut z0_low = SpectralState::zeros(len, params.k_trunc);
            let mut zt_low = SpectralState::zeros(len, params.k_trunc);
            for j in z0_low.coeffs.keys().copied().collect::<Vec<_>>() {
                z0_low.coeffs.insert(j, z0.get(j));
                zt_low.coeffs.insert(j, zt.get(j));
            }
            let v = synthesize_v(&z0_low, &zt_low, &family, spec)?;
            let steps_even = steps + steps % 2;
            let [vs, _, _] = v.sample(residual_samples(steps_even, half, spec, &z0_low));
            let res = moment_residuals(&vs, half, spec, &z0_low, &zt_low)?;
            let nz = z0_low.norm();
            let moment_residual = if nz > 0.0 {
                max_residual(&res, k_check(params.k_trunc)) / nz
            } else {
                0.0
            };
            let run = run_z_system(&z0, &v, spec, steps)?;
            let u = assemble_u(&run, Some(&tc), 0.0)?;
            let ufun = |s: f64| u.at(s);
            let ctrl = simulate(&y_half, Some(&ufun), half, &cfg)?;
            let y_end = ctrl.final_state().clone();
            let e_end = y_end.energy();
            let h_def = basis.as_ref().map(|b| (h_a_defect(&y, b), h_a_defect(&y_end, b)));
            let report = IntervalReport {
                schedule: iv.clone(),
                transition: tc,
                energy_start: e_start,
                energy_end: e_end,
                ratio: if e_start > 0.0 { (e_end / e_start).sqrt() } else { 0.0 },
                moment_residual,
                family_tolerance: family.tolerance,
                h_a_defect: h_def,
                v_sup: v.sup_norm(),
                u: SampledControl {
                    t0: iv.t_start + half,
                    ..u
                },
            };
            Ok((report, y_end))
        };
        let (report, y_end) = step().map_err(wrap)?;
        intervals.push(report);
        y = y_end;
    }
    let total_ratio = if e_initial > 0.0 { (y.energy() / e_initial).sqrt() } else { 0.0 };
    Ok(ControlPlan {
        t: params.t,
        n0: params.n0,
        q: params.q,
        scheme: params.scheme,
        intervals,
        total_ratio,
        final_state: y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_dyadic() {
        let s = iteration_schedule(1.0, 4.0, 0, 3).unwrap();
        let ends: Vec<(f64, f64)> = s.iter().map(|i| (i.t_start, i.t_end)).collect();
        assert_eq!(ends, vec![(0.0, 0.5), (0.5, 0.75), (0.75, 0.875)]);
        assert!((s[1].mu1 / s[0].mu1 - 2f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn sampled_control_is_zero_before_start() {
        let u = SampledControl {
            t0: 1.0,
            dt: 0.5,
            values: vec![2.0, 4.0, 6.0],
        };
        assert_eq!(u.at(0.5), 0.0);
        assert_eq!(u.at(1.25), 3.0);
        assert_eq!(u.at(9.0), 6.0);
    }
}
