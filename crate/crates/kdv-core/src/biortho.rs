//! Families bi-orthogonal to `{e^{−iλ_k s}}` on `[−T/2, T/2]`.
//!
//! Each member has Fourier transform `ψ(z) = Σ_a w_a P_a(z − λ_a) Σ_β(λ_a − z)`,
//! where `P_a` is the truncated Weierstrass-type product vanishing at the
//! other eigenvalues and `Σ_β` is the normalized transform of the bump
//! `σ_β(x) = e^{−β/(1−x²)}`. A polynomial in `z` times a transform is the
//! transform of a differential operator applied to the bump, so members are
//! evaluated in the time domain as
//! `φ(t) = Σ_a w_a e^{iλ_a t} Σ_m p_{a,m} (−i)^m g^{(m)}(t)` with
//! `g(t) = σ_β(t/ν)/(‖σ_β‖₁ ν)`. Support is exactly `[−ν, ν]`.

use crate::error::{KdvError, Result};
use crate::numerics::{gauss, gauss_c, simpson_c};
use crate::spectrum_b::SpectrumB;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;

pub const DEFAULT_DELTA: f64 = 0.1;
/// Number of sampling intervals on `[−T/2, T/2]`.
pub const GRID_INTERVALS: usize = 4096;

/// `K₂ = 2^{5/2} L₀^{3/2} / √(6π)`.
pub fn k2_constant(l0: f64) -> f64 {
    2f64.powf(2.5) * l0.powf(1.5) / (6.0 * PI).sqrt()
}

/// `(β, ν)` for horizon `t`, margin `delta` and reference length `l0`.
pub fn bump_parameters(t: f64, delta: f64, l0: f64) -> (f64, f64) {
    let k2 = k2_constant(l0);
    let beta = 8.0 * 2f64.sqrt() * k2.powf(1.5) * (1.0 + delta).powf(1.5)
        / (9.0 * t.sqrt() * (1.0 - delta).sqrt());
    (beta, t * (1.0 - delta) / 2.0)
}

/// The normalized bump rescaled to `[−ν, ν]`.
#[derive(Clone, Debug, Serialize)]
pub struct Bump {
    pub beta: f64,
    pub nu: f64,
    /// `∫_{−1}^{1} e^{−βx²/(1−x²)} dx`, i.e. `‖σ_β‖₁ e^{β}`.
    pub norm: f64,
}

fn bump_panels(beta: f64) -> usize {
    64 + (4.0 * beta.sqrt()) as usize
}

impl Bump {
    pub fn new(beta: f64, nu: f64) -> Result<Self> {
        if !(beta > 0.0) || !(nu > 0.0) || !beta.is_finite() || !nu.is_finite() {
            return Err(KdvError::validation(format!(
                "bump needs β > 0 and ν > 0, got β = {beta}, ν = {nu}"
            )));
        }
        let norm = 2.0 * gauss(|x| scaled_sigma(beta, x), 0.0, 1.0, bump_panels(beta));
        if !(norm > 0.0) {
            return Err(KdvError::numerical(format!("bump norm vanished for β = {beta}")));
        }
        Ok(Bump { beta, nu, norm })
    }

    /// `Σ_β(z) = ‖σ_β‖₁⁻¹ ∫_{−1}^{1} σ_β(x) e^{−iνxz} dx`.
    pub fn transform(&self, z: C64) -> C64 {
        let osc = (self.nu * z.norm()) / PI;
        let panels = bump_panels(self.beta) + (4.0 * osc) as usize;
        let nu = self.nu;
        let beta = self.beta;
        // σ_β is even, so only the cosine part survives.
        2.0 * gauss_c(|x| (nu * x * z).cos() * scaled_sigma(beta, x), 0.0, 1.0, panels) / self.norm
    }

    /// `g^{(m)}(t)` for `m = 0..=order`.
    pub fn derivatives(&self, t: f64, order: usize) -> Vec<f64> {
        let mut out = vec![0.0; order + 1];
        let y = t / self.nu;
        if y.abs() >= 1.0 {
            return out;
        }
        let u0 = -self.beta * y * y / ((1.0 - y) * (1.0 + y));
        let e0 = u0.exp();
        if e0 == 0.0 {
            return out;
        }
        // Taylor coefficients of log σ about y, in the variable t.
        let (a, b) = (1.0 / (1.0 - y), 1.0 / (1.0 + y));
        let mut u = vec![0.0; order + 1];
        let (mut pa, mut pb, mut scale) = (a, b, 1.0);
        for un in u.iter_mut().skip(1) {
            pa *= a;
            pb *= -b;
            scale /= self.nu;
            *un = -0.5 * self.beta * (pa + pb) * scale;
        }
        // Coefficients of exp of the series.
        let mut e = vec![0.0; order + 1];
        e[0] = e0;
        for n in 1..=order {
            let s: f64 = (1..=n).map(|k| k as f64 * u[k] * e[n - k]).sum();
            e[n] = s / n as f64;
        }
        let mut fact = 1.0;
        let c = 1.0 / (self.norm * self.nu);
        for m in 0..=order {
            if m > 0 {
                fact *= m as f64;
            }
            out[m] = fact * e[m] * c;
        }
        out
    }
}

fn scaled_sigma(beta: f64, x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        (-beta * x * x / ((1.0 - x) * (1.0 + x))).exp()
    }
}

/// `Σ_β(z)` for given `β` and `ν`.
#[allow(non_snake_case)]
pub fn Sigma_beta(z: C64, beta: f64, nu: f64) -> Result<C64> {
    Ok(Bump::new(beta, nu)?.transform(z))
}

/// `Ψ_j(z) = ∏_{k≠j, |k|≤K} (1 − z/(λ_k − λ_j))` over the listed eigenvalues.
#[allow(non_snake_case)]
pub fn Psi_trunc(j: i64, z: C64, lambda: &[(i64, f64)]) -> Result<C64> {
    let lj = lookup(lambda, j)?;
    let mut p = C64::new(1.0, 0.0);
    for &(k, lk) in lambda {
        if k == j {
            continue;
        }
        let d = lk - lj;
        if d == 0.0 {
            return Err(KdvError::numerical(format!("λ_{k} = λ_{j}: degenerate spectrum")));
        }
        p *= 1.0 - z / d;
    }
    Ok(p)
}

fn lookup(lambda: &[(i64, f64)], j: i64) -> Result<f64> {
    lambda
        .iter()
        .find(|&&(k, _)| k == j)
        .map(|&(_, l)| l)
        .ok_or_else(|| KdvError::validation(format!("index {j} is not in the eigenvalue list")))
}

/// One anchored term `w e^{iλ_a t} P_a(−i d/dt) g`.
#[derive(Clone, Debug, Serialize)]
pub struct Component {
    pub anchor: i64,
    pub lambda: f64,
    pub weight: C64,
    /// Coefficients of `P_a(w) = ∏_{k∉excluded} (1 − w/(λ_k − λ_a))`, lowest first.
    pub poly: Vec<f64>,
}

impl Component {
    fn new(anchor: i64, weight: C64, lambda: &[(i64, f64)], excluded: &[i64]) -> Result<Self> {
        let la = lookup(lambda, anchor)?;
        let mut poly = vec![1.0];
        for &(k, lk) in lambda {
            if excluded.contains(&k) {
                continue;
            }
            let d = lk - la;
            if d == 0.0 {
                return Err(KdvError::numerical(format!(
                    "λ_{k} = λ_{anchor}: degenerate spectrum outside the compensated pair"
                )));
            }
            let mut next = vec![0.0; poly.len() + 1];
            for (m, &c) in poly.iter().enumerate() {
                next[m] += c;
                next[m + 1] -= c / d;
            }
            poly = next;
        }
        Ok(Component {
            anchor,
            lambda: la,
            weight,
            poly,
        })
    }

    fn poly_at(&self, w: C64) -> C64 {
        self.poly.iter().rev().fold(C64::new(0.0, 0.0), |acc, &c| acc * w + c)
    }
}

/// A member of the family with its samples on the time grid.
#[derive(Clone, Debug, Serialize)]
pub struct FamilyMember {
    pub label: String,
    pub components: Vec<Component>,
    #[serde(skip)]
    pub samples: Vec<C64>,
}

impl FamilyMember {
    /// `φ(t)` from the closed form.
    pub fn eval(&self, bump: &Bump, t: f64) -> C64 {
        self.eval_derivs(bump, t, 0)[0]
    }

    /// `(φ(t), φ'(t))`.
    pub fn eval_with_deriv(&self, bump: &Bump, t: f64) -> (C64, C64) {
        let d = self.eval_derivs(bump, t, 1);
        (d[0], d[1])
    }

    /// `φ(t), φ'(t), …, φ^{(order)}(t)` from the Leibniz rule applied to
    /// `e^{iλt} Σ_m p_m (−i)^m g^{(m)}(t)`.
    pub fn eval_derivs(&self, bump: &Bump, t: f64, order: usize) -> Vec<C64> {
        let zero = C64::new(0.0, 0.0);
        let degree = self.components.iter().map(|c| c.poly.len()).max().unwrap_or(1) - 1;
        let g = bump.derivatives(t, degree + order);
        let mut out = vec![zero; order + 1];
        if g.iter().all(|&v| v == 0.0) {
            return out;
        }
        for comp in &self.components {
            // s[r] = Σ_m p_m (−i)^m g^{(m+r)}
            let mut s = vec![zero; order + 1];
            let mut rot = C64::new(1.0, 0.0);
            for (m, &p) in comp.poly.iter().enumerate() {
                if m > 0 {
                    rot *= C64::new(0.0, -1.0);
                }
                for (r, sr) in s.iter_mut().enumerate() {
                    *sr += rot * (p * g[m + r]);
                }
            }
            let w = comp.weight * C64::new(0.0, comp.lambda * t).exp();
            let il = C64::new(0.0, comp.lambda);
            for (k, o) in out.iter_mut().enumerate() {
                let mut binom = 1.0;
                let mut acc = zero;
                for r in 0..=k {
                    acc += binom * il.powu((k - r) as u32) * s[r];
                    binom = binom * (k - r) as f64 / (r + 1) as f64;
                }
                *o += w * acc;
            }
        }
        out
    }

    /// `ψ(z) = ∫ φ(s) e^{−izs} ds` from the frequency-side formula.
    pub fn transform(&self, bump: &Bump, z: C64) -> C64 {
        self.components
            .iter()
            .map(|c| c.weight * c.poly_at(z - c.lambda) * bump.transform(c.lambda - z))
            .sum()
    }
}

/// Which near-degenerate pairs get a compensated member.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CompensationRequest {
    /// The pair `±p` with `λ_{−p} = −λ_p ≈ 0`.
    S1 { p: i64 },
    /// Two positive indices with `λ_p ≈ λ_q`.
    S2 { p: i64, q: i64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Compensation {
    S1Pair { indices: [i64; 2], c1: f64, c2: f64 },
    S2Pair { indices: [i64; 2], c1: f64, c2: f64, a_l: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct BiorthogonalFamily {
    #[serde(rename = "T")]
    pub t: f64,
    pub beta: f64,
    pub nu: f64,
    pub delta: f64,
    #[serde(rename = "K_trunc")]
    pub k_trunc: usize,
    #[serde(rename = "L0")]
    pub l0: f64,
    pub lambda: Vec<(i64, f64)>,
    pub bump: Bump,
    /// `φ_j` for every listed index.
    pub members: Vec<FamilyMember>,
    /// Compensated members: `ϑ₀` for an S1 pair, `ϑ₊, ϑ₋` for an S2 pair.
    pub compensated: Vec<FamilyMember>,
    pub compensation: Vec<Compensation>,
    /// Largest deviation from the identity of the checked pairing matrix.
    pub tolerance: f64,
}

impl BiorthogonalFamily {
    pub fn step(&self) -> f64 {
        self.t / GRID_INTERVALS as f64
    }

    /// Sample times `−T/2 + i·h`.
    pub fn times(&self) -> Vec<f64> {
        let h = self.step();
        (0..=GRID_INTERVALS).map(|i| -0.5 * self.t + i as f64 * h).collect()
    }

    pub fn member(&self, j: i64) -> Option<&FamilyMember> {
        self.members.iter().find(|m| m.components[0].anchor == j && m.components.len() == 1)
    }

    pub fn compensated_member(&self, label: &str) -> Option<&FamilyMember> {
        self.compensated.iter().find(|m| m.label == label)
    }

    /// `∫ φ(s) e^{−iλs} ds` of a member by Simpson on its samples.
    pub fn pair(&self, member: &FamilyMember, lambda: f64) -> C64 {
        pairing(&member.samples, self.t, lambda)
    }
}

/// `∫_{−T/2}^{T/2} φ(s) e^{−iλs} ds` by composite Simpson on uniform samples.
pub fn pairing(samples: &[C64], t: f64, lambda: f64) -> C64 {
    let n = samples.len() - 1;
    let h = t / n as f64;
    let vals: Vec<C64> = samples
        .iter()
        .enumerate()
        .map(|(i, &v)| v * C64::new(0.0, -lambda * (-0.5 * t + i as f64 * h)).exp())
        .collect();
    simpson_c(&vals, h)
}

/// Options for [`build_family`].
#[derive(Clone, Debug)]
pub struct FamilyOptions {
    pub delta: f64,
    /// Reference length entering `K₂`; the spectrum's length when `None`.
    pub l0: Option<f64>,
    pub compensation: Vec<CompensationRequest>,
}

impl Default for FamilyOptions {
    fn default() -> Self {
        FamilyOptions {
            delta: DEFAULT_DELTA,
            l0: None,
            compensation: Vec::new(),
        }
    }
}

/// Builds `φ_j` for `0 < |j| ≤ K_trunc` and the requested compensated members.
pub fn build_family(
    spectrum: &SpectrumB,
    t: f64,
    k_trunc: usize,
    options: &FamilyOptions,
) -> Result<BiorthogonalFamily> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(KdvError::validation(format!("horizon T must be positive, got {t}")));
    }
    if k_trunc == 0 || k_trunc > spectrum.jmax {
        return Err(KdvError::validation(format!(
            "K_trunc = {k_trunc} must lie in 1..={} (the spectrum's jmax)",
            spectrum.jmax
        )));
    }
    let delta = options.delta;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(KdvError::validation(format!("δ must lie in (0, 1), got {delta}")));
    }
    let l0 = options.l0.unwrap_or(spectrum.len);
    let (beta, nu) = bump_parameters(t, delta, l0);
    let bump = Bump::new(beta, nu)?;
    let lambda = spectrum.lambdas_upto(k_trunc);

    let mut members = Vec::with_capacity(lambda.len());
    for &(j, _) in &lambda {
        members.push(FamilyMember {
            label: format!("phi_{j}"),
            components: vec![Component::new(j, C64::new(1.0, 0.0), &lambda, &[j])?],
            samples: Vec::new(),
        });
    }

    let mut compensated = Vec::new();
    let mut compensation = Vec::new();
    for req in &options.compensation {
        match *req {
            CompensationRequest::S1 { p } => {
                let p = p.abs();
                let lp = lookup(&lambda, p)?;
                lookup(&lambda, -p)?;
                let c = 1.0 / (1.0 + bump.transform(C64::new(2.0 * lp, 0.0)).re);
                compensated.push(FamilyMember {
                    label: format!("theta_0[{p}]"),
                    components: vec![
                        Component::new(p, C64::new(c, 0.0), &lambda, &[p, -p])?,
                        Component::new(-p, C64::new(c, 0.0), &lambda, &[p, -p])?,
                    ],
                    samples: Vec::new(),
                });
                compensation.push(Compensation::S1Pair {
                    indices: [p, -p],
                    c1: c,
                    c2: c,
                });
            }
            CompensationRequest::S2 { p, q } => {
                if p == q || p <= 0 || q <= 0 {
                    return Err(KdvError::validation(format!(
                        "S2 compensation needs two distinct positive indices, got ({p}, {q})"
                    )));
                }
                let mut first = None;
                for (sign, tag) in [(1, "plus"), (-1, "minus")] {
                    let (a, b) = (sign * p, sign * q);
                    let (la, lb) = (lookup(&lambda, a)?, lookup(&lambda, b)?);
                    let a_l = s2_a_factor(&lambda, a, b);
                    let s = bump.transform(C64::new(la - lb, 0.0)).re;
                    let c1 = 1.0 / (1.0 + s);
                    let c2 = a_l / (1.0 + s);
                    compensated.push(FamilyMember {
                        label: format!("theta_{tag}[{p},{q}]"),
                        components: vec![
                            Component::new(a, C64::new(c1, 0.0), &lambda, &[a, b])?,
                            Component::new(b, C64::new(c2, 0.0), &lambda, &[a, b])?,
                        ],
                        samples: Vec::new(),
                    });
                    first.get_or_insert((c1, c2, a_l));
                }
                let (c1, c2, a_l) = first.expect("set above");
                compensation.push(Compensation::S2Pair {
                    indices: [p, q],
                    c1,
                    c2,
                    a_l,
                });
            }
        }
    }

    let h = t / GRID_INTERVALS as f64;
    let times: Vec<f64> = (0..=GRID_INTERVALS).map(|i| -0.5 * t + i as f64 * h).collect();
    let sample = |m: &mut FamilyMember| {
        m.samples = times.iter().map(|&s| m.eval(&bump, s)).collect();
    };
    members.par_iter_mut().for_each(sample);
    compensated.par_iter_mut().for_each(sample);
    for m in members.iter().chain(&compensated) {
        if m.samples.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(KdvError::numerical(format!("non-finite samples in {}", m.label)));
        }
    }

    let mut family = BiorthogonalFamily {
        t,
        beta,
        nu,
        delta,
        k_trunc,
        l0,
        lambda,
        bump,
        members,
        compensated,
        compensation,
        tolerance: 0.0,
    };
    family.tolerance = pairing_defect(&family, (k_trunc / 2).clamp(1, 6));
    Ok(family)
}

/// `a = ∏_{k∉{p,q}} (λ_k − λ_q)/(λ_k − λ_p)` over the listed eigenvalues.
pub fn s2_a_factor(lambda: &[(i64, f64)], p: i64, q: i64) -> f64 {
    let lp = lambda.iter().find(|e| e.0 == p).map_or(f64::NAN, |e| e.1);
    let lq = lambda.iter().find(|e| e.0 == q).map_or(f64::NAN, |e| e.1);
    lambda
        .iter()
        .filter(|e| e.0 != p && e.0 != q)
        .map(|&(_, lk)| (lk - lq) / (lk - lp))
        .product()
}

/// `max |pairing(φ_j, λ_k) − δ_jk|` over uncompensated `|j|, |k| ≤ kmax`.
pub fn pairing_defect(family: &BiorthogonalFamily, kmax: usize) -> f64 {
    let kmax = kmax as i64;
    let mut worst: f64 = 0.0;
    for &(j, _) in family.lambda.iter().filter(|e| e.0.abs() <= kmax) {
        let m = family.member(j).expect("every listed index has a member");
        for &(k, lk) in family.lambda.iter().filter(|e| e.0.abs() <= kmax) {
            let target = if j == k { 1.0 } else { 0.0 };
            worst = worst.max((family.pair(m, lk) - target).norm());
        }
    }
    worst
}

/// `(1/2π) ∫_{|x−λ_a|≤X} ψ(x) e^{ixt} dx` with `X` grown until `|ψ|` at the
/// cut-off falls below `tail` relative to its peak. Returns the value and `X`.
pub fn inverse_transform(member: &FamilyMember, bump: &Bump, t: f64, tail: f64) -> Result<(C64, f64)> {
    let center = member.components[0].lambda;
    let peak = member.transform(bump, C64::new(center, 0.0)).norm().max(1e-300);
    let mut x_max = 8.0 / bump.nu;
    loop {
        let edge = member
            .transform(bump, C64::new(center + x_max, 0.0))
            .norm()
            .max(member.transform(bump, C64::new(center - x_max, 0.0)).norm());
        if edge < tail * peak {
            break;
        }
        x_max *= 1.5;
        if x_max > 1e5 / bump.nu {
            return Err(KdvError::numerical(format!(
                "inverse transform tail did not decay below {tail:e} by X_max = {x_max:.3e}"
            )));
        }
    }
    let panels = 64 + (x_max * (t.abs() + bump.nu) / PI) as usize;
    let v = gauss_c(
        |x| member.transform(bump, C64::new(x, 0.0)) * C64::new(0.0, x * t).exp(),
        center - x_max,
        center + x_max,
        panels,
    ) / (2.0 * PI);
    Ok((v, x_max))
}
