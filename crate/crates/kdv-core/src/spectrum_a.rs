//! Spectrum of the non-self-adjoint operator `𝒜 = −∂³ − ∂` with boundary
//! conditions `φ(0) = φ(L) = φ'(L) = 0`.
//!
//! Eigenvalues are written `ζ = −i·2τ(4τ² − 1)` with complex `τ`. The
//! exponents of `ℱ''' + ℱ' + ζℱ = 0` are `iξ`, `ξ ∈ {−2τ, τ ± √(1 − 3τ²)}`.

use crate::critical_lengths::{lambda_c, type1_expsum, CriticalPair, PairKind};
use crate::error::{KdvError, Result};
use crate::expsum::{kernel_function, BoundaryRow, ExpSum};
use crate::numerics::scan_roots;
use crate::spectrum_b::{full_spectrum, perturbation_prediction, SpectrumB};
use num_complex::Complex64 as C64;
use serde::Serialize;
use std::f64::consts::PI;

const NEWTON_TOL: f64 = 1e-13;
const NEWTON_MAX_ITER: usize = 50;
const CERTIFICATE_TOL: f64 = 1e-6;

/// One eigenpair of `𝒜`.
#[derive(Clone, Debug, Serialize)]
pub struct EigenmodeA {
    #[serde(skip)]
    pub zeta: C64,
    #[serde(skip)]
    pub tau: C64,
    /// Leading exponential coefficient of the normalized eigenfunction.
    #[serde(skip)]
    pub r1: C64,
    #[serde(rename = "L")]
    pub len: f64,
    #[serde(skip)]
    pub df_at_0: C64,
    pub certificate: f64,
    #[serde(skip)]
    pub func: ExpSum,
}

impl EigenmodeA {
    pub fn eval(&self, x: f64) -> C64 {
        self.func.eval(x)
    }
}

fn i() -> C64 {
    C64::new(0.0, 1.0)
}

/// `ζ(τ) = −i·2τ(4τ² − 1)`.
pub fn zeta_of_tau(tau: C64) -> C64 {
    -i() * 2.0 * tau * (4.0 * tau * tau - 1.0)
}

/// Real and imaginary parts of
/// `−s cos(3Lτ) + s cos(Ls) − i s sin(3Lτ) + 3iτ sin(Ls)`, `s = √(1 − 3τ²)`.
pub fn char_a(t_r: f64, t_i: f64, len: f64) -> (f64, f64) {
    let tau = C64::new(t_r, t_i);
    let s = (1.0 - 3.0 * tau * tau).sqrt();
    let g = -s * (3.0 * len * tau).cos() + s * (len * s).cos() - i() * s * (3.0 * len * tau).sin()
        + 3.0 * i() * tau * (len * s).sin();
    (g.re, g.im)
}

/// `sin(Ls)/s`, entire in `s²`.
fn sinc_l(s: C64, len: f64) -> C64 {
    let z = len * s;
    if z.norm() < 1e-4 {
        let z2 = z * z;
        len * (1.0 - z2 / 6.0 + z2 * z2 / 120.0)
    } else {
        z.sin() / s
    }
}

/// `char_a / s`. It is entire in `τ` and has no trivial root at `τ = ±1/√3`.
fn reduced_char_a(tau: C64, len: f64) -> C64 {
    let s = (1.0 - 3.0 * tau * tau).sqrt();
    -(3.0 * len * tau).cos() + (len * s).cos() - i() * (3.0 * len * tau).sin()
        + 3.0 * i() * tau * sinc_l(s, len)
}

/// Damped complex Newton on the reduced characteristic function.
pub fn newton_tau(seed: C64, len: f64) -> Result<C64> {
    let f = |t: C64| reduced_char_a(t, len);
    let mut t = seed;
    let mut g = f(t);
    for _ in 0..NEWTON_MAX_ITER {
        if g.norm() < NEWTON_TOL {
            return Ok(t);
        }
        let h = 1e-6 * (1.0 + t.norm());
        let d = (f(t + h) - f(t - h)) / (2.0 * h);
        if d.norm() == 0.0 {
            break;
        }
        let mut step = g / d;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = t - step;
            let gc = f(cand);
            if gc.norm() < g.norm() {
                t = cand;
                g = gc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || step.norm() < 1e-16 * (1.0 + t.norm()) {
            break;
        }
    }
    if g.norm() < 1e-10 {
        return Ok(t);
    }
    Err(KdvError::numerical(format!(
        "Newton on the 𝒜 characteristic function did not converge from τ = {seed} (last |G| = {:.3e})",
        g.norm()
    )))
}

/// Characteristic exponents `κ = iξ` for complex `τ`.
pub fn exponents_a(tau: C64) -> [C64; 3] {
    let s = (1.0 - 3.0 * tau * tau).sqrt();
    [i() * (-2.0 * tau), i() * (tau + s), i() * (tau - s)]
}

/// Builds the normalized eigenfunction for `ζ(τ)`, phased so that
/// `ℱ'(0)` is real and positive.
pub fn build_mode_a(tau: C64, len: f64) -> Result<EigenmodeA> {
    let kappas = exponents_a(tau);
    let rows = [
        BoundaryRow::ValueAt0,
        BoundaryRow::ValueAtL,
        BoundaryRow::SlopeAtL,
    ];
    let (raw, certificate) = kernel_function(&kappas, rows, len);
    if !(certificate < CERTIFICATE_TOL) {
        return Err(KdvError::numerical(format!(
            "τ = {tau} at L = {len} is not an eigenvalue of 𝒜 (boundary residual {certificate:.3e})"
        )));
    }
    let norm = raw.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(KdvError::numerical(format!("degenerate 𝒜 eigenfunction at τ = {tau}")));
    }
    let unit = raw.scaled(C64::new(1.0 / norm, 0.0));
    let d0 = unit.deriv(0.0, 1);
    let phase = if d0.norm() > 0.0 {
        d0.conj() / d0.norm()
    } else {
        C64::new(1.0, 0.0)
    };
    let func = unit.scaled(phase);
    Ok(EigenmodeA {
        zeta: zeta_of_tau(tau),
        tau,
        r1: func.terms[0].coef,
        len,
        df_at_0: func.deriv(0.0, 1),
        certificate,
        func,
    })
}

/// The 𝒜-eigenmode bifurcating from `iλ_c(pair)` (or from `−iλ_c` when
/// `conjugate` is set) at a length `len` near `l0`.
pub fn eigen_near(pair: &CriticalPair, l0: f64, len: f64, conjugate: bool) -> Result<EigenmodeA> {
    let tc = PI * (2.0 * pair.k as f64 + pair.l as f64) / (3.0 * l0);
    let seed = if conjugate { tc } else { -tc };
    let tau = newton_tau(C64::new(seed, 0.0), len)?;
    let mode = build_mode_a(tau, len)?;
    let target = if conjugate { -lambda_c(pair) } else { lambda_c(pair) };
    if (mode.zeta - i() * target).norm() > 0.1 {
        return Err(KdvError::numerical(format!(
            "Newton from the critical seed converged to ζ = {} far from i·{target}",
            mode.zeta
        )));
    }
    Ok(mode)
}

/// Real-branch function `cos(Lw + θ) − e^{−3Lτ} w/√(1 + 12τ²)`,
/// `w = √(1 + 3τ²)`, `tan θ = 3τ/w`.
pub fn char_a_real(t: f64, len: f64) -> f64 {
    let w = (1.0 + 3.0 * t * t).sqrt();
    let theta = (3.0 * t / w).atan();
    (len * w + theta).cos() - (-3.0 * len * t).exp() * w / (1.0 + 12.0 * t * t).sqrt()
}

/// The first `count` real eigenvalues `ζ = −2τ(4τ² + 1) < 0`, ordered from
/// the one closest to zero.
pub fn real_spectrum_a(len: f64, count: usize) -> Result<Vec<EigenmodeA>> {
    if !(len > 0.0) {
        return Err(KdvError::validation(format!("length must be positive, got {len}")));
    }
    let mut grid: Vec<f64> = (0..=2000)
        .map(|k| 1e-12 * 10f64.powf(10.0 * k as f64 / 2000.0))
        .collect();
    let step = (PI / len) / 64.0;
    let mut hi = 1e-2;
    let mut roots = Vec::new();
    let mut lo_idx = 0usize;
    for _ in 0..200 {
        while grid.last().copied().unwrap_or(0.0) < hi {
            let next = grid.last().copied().unwrap_or(0.0) + step.min(1e-3);
            grid.push(next);
        }
        let f = |t: f64| char_a_real(t, len);
        let found = scan_roots(f, &grid[lo_idx..], 1e-16)?;
        roots.extend(found);
        roots.sort_by(|a, b| a.partial_cmp(b).expect("finite roots"));
        roots.dedup();
        if roots.len() >= count {
            break;
        }
        lo_idx = grid.len() - 1;
        hi *= 2.0;
    }
    if roots.len() < count {
        return Err(KdvError::numerical(format!(
            "found only {} of {count} real 𝒜 eigenvalues below τ = {hi}",
            roots.len()
        )));
    }
    roots
        .iter()
        .take(count)
        .map(|&t| build_mode_a(C64::new(0.0, t), len))
        .collect()
}

/// A real or complex combination of ℬ eigenfunctions near one critical pair.
#[derive(Clone, Debug, Serialize)]
pub struct AtomB {
    pub pair: CriticalPair,
    pub indices: Vec<i64>,
    #[serde(skip)]
    pub coefs: Vec<C64>,
    /// `L²` distance to the target critical eigenfunction.
    pub match_residual: f64,
    #[serde(skip)]
    pub func: ExpSum,
}

#[derive(Clone, Debug, Serialize)]
pub struct QuasiInvariantBasis {
    #[serde(rename = "L")]
    pub len: f64,
    #[serde(rename = "L0")]
    pub l0: f64,
    pub basis_a: Vec<EigenmodeA>,
    pub basis_b: Vec<AtomB>,
}

/// Positive ℬ-index whose eigenvalue is closest to `target`, excluding `taken`.
pub fn nearest_index(spec: &SpectrumB, target: f64, taken: &[i64]) -> Result<i64> {
    spec.modes
        .iter()
        .filter(|m| m.index > 0 && !taken.contains(&m.index))
        .min_by(|a, b| {
            (a.lambda - target)
                .abs()
                .partial_cmp(&(b.lambda - target).abs())
                .expect("finite eigenvalues")
        })
        .map(|m| m.index)
        .ok_or_else(|| KdvError::numerical(format!("no ℬ eigenvalue near {target}")))
}

/// Extends `f` analytically to `[0, len]`.
fn with_len(f: &ExpSum, len: f64) -> ExpSum {
    let kappas: Vec<C64> = f.terms.iter().map(|t| t.kappa).collect();
    let coefs: Vec<C64> = f
        .terms
        .iter()
        .map(|t| {
            // Re-anchor each term for the new interval.
            let shift = crate::expsum::anchor(t.kappa, len);
            t.coef * (t.kappa * (shift - t.shift)).exp()
        })
        .collect();
    ExpSum::new(&kappas, &coefs, len)
}

/// Projection of the critical eigenfunction `g` onto `span{ℰ_j : j ∈ idx}`.
fn project_onto(spec: &SpectrumB, g: &ExpSum, idx: &[i64]) -> Result<(Vec<C64>, ExpSum, f64)> {
    let ext = with_len(g, spec.len);
    let mut coefs = Vec::new();
    let mut func = ExpSum::zero(spec.len);
    let mut captured = 0.0;
    for &j in idx {
        let m = spec
            .mode(j)
            .ok_or_else(|| KdvError::numerical(format!("ℬ mode {j} unavailable")))?;
        let c = ext.inner(&m.func);
        captured += c.norm_sqr();
        func = func.add(&m.func.scaled(c));
        coefs.push(c);
    }
    let resid = (ext.inner(&ext).re - captured).max(0.0).sqrt();
    Ok((coefs, func, resid))
}

/// The quasi-invariant bases `M_𝒜(L)` and `M_ℬ(L)` attached to `l0`.
pub fn quasi_invariant_basis(spec: &SpectrumB, l0: f64) -> Result<QuasiInvariantBasis> {
    let len = spec.len;
    let cl = crate::critical_lengths::classify_length(l0, 1e-9)?
        .ok_or_else(|| KdvError::validation(format!("L0 = {l0} is not a critical length")))?;
    let mut basis_a = Vec::new();
    let mut basis_b = Vec::new();
    let mut taken: Vec<i64> = Vec::new();
    for pair in &cl.pairs {
        let g = type1_expsum(pair, cl.l0)?;
        match pair.kind {
            PairKind::S1 => {
                basis_a.push(eigen_near(pair, cl.l0, len, false)?);
                let preds = perturbation_prediction(pair, cl.l0, len);
                let target = preds.iter().cloned().fold(f64::MIN, f64::max);
                let j = nearest_index(spec, target, &taken)?;
                taken.push(j);
                let (coefs, _, resid) = project_onto(spec, &g, &[j, -j])?;
                // A real Type 1 function has conjugate coefficients on ℰ_j and
                // ℰ_{−j}, so the atom is the normalized real part ℰ_j + ℰ_{−j}.
                let sign = if coefs[0].re >= 0.0 { 1.0 } else { -1.0 };
                let sum = spec.mode(j).expect("mode exists").func.add(
                    &spec.mode(-j).expect("mode exists").func,
                );
                let w = C64::new(sign / sum.norm(), 0.0);
                basis_b.push(AtomB {
                    pair: *pair,
                    indices: vec![j, -j],
                    coefs: vec![w, w],
                    match_residual: resid,
                    func: sum.scaled(w),
                });
            }
            PairKind::S2 => {
                basis_a.push(eigen_near(pair, cl.l0, len, false)?);
                basis_a.push(eigen_near(pair, cl.l0, len, true)?);
                let preds = perturbation_prediction(pair, cl.l0, len);
                let p = nearest_index(spec, preds[0], &taken)?;
                taken.push(p);
                let q = nearest_index(spec, preds[1], &taken)?;
                taken.push(q);
                let (coefs, func, resid) = project_onto(spec, &g, &[p, q])?;
                basis_b.push(AtomB {
                    pair: *pair,
                    indices: vec![p, q],
                    coefs: coefs.clone(),
                    match_residual: resid,
                    func: func.clone(),
                });
                basis_b.push(AtomB {
                    pair: *pair,
                    indices: vec![-p, -q],
                    coefs: coefs.iter().map(|c| c.conj()).collect(),
                    match_residual: resid,
                    func: func.conj(),
                });
            }
            PairKind::S3 => {
                basis_a.push(eigen_near(pair, cl.l0, len, false)?);
                basis_a.push(eigen_near(pair, cl.l0, len, true)?);
                let preds = perturbation_prediction(pair, cl.l0, len);
                let j = nearest_index(spec, preds[0], &taken)?;
                taken.push(j);
                let (coefs, _, resid) = project_onto(spec, &g, &[j])?;
                let ph = coefs[0] / coefs[0].norm();
                let m = spec.mode(j).expect("mode exists");
                basis_b.push(AtomB {
                    pair: *pair,
                    indices: vec![j],
                    coefs: vec![ph],
                    match_residual: resid,
                    func: m.func.scaled(ph),
                });
                basis_b.push(AtomB {
                    pair: *pair,
                    indices: vec![-j],
                    coefs: vec![ph.conj()],
                    match_residual: resid,
                    func: m.func.scaled(ph).conj(),
                });
            }
        }
    }
    Ok(QuasiInvariantBasis {
        len,
        l0: cl.l0,
        basis_a,
        basis_b,
    })
}

/// Computes the ℬ spectrum covering the elliptic modes, then the bases.
pub fn quasi_invariant_basis_at(len: f64, l0: f64) -> Result<QuasiInvariantBasis> {
    let n = crate::spectrum_b::elliptic_eigenvalues(len)?.len().max(1);
    let spec = full_spectrum(len, n + 2)?;
    quasi_invariant_basis(&spec, l0)
}
