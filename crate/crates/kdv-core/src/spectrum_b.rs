//! Spectrum of the skew-adjoint operator `ℬ = −∂³ − ∂` with boundary
//! conditions `φ(0) = φ(L) = 0`, `φ'(0) = φ'(L)`.
//!
//! An eigenvalue `λ` is parameterized by `λ = 2τ(4τ² − 1)`. The three
//! characteristic exponents of `ℰ''' + ℰ' + iλℰ = 0` are `iξ` with
//! `ξ ∈ {2τ, −τ ± √(1 − 3τ²)}`. The elliptic regime `3τ² < 1` contains
//! finitely many eigenvalues, the hyperbolic regime `3τ² > 1` infinitely many.

use crate::critical_lengths::{
    classify_length, lambda_c, solve_pairs, CriticalPair, PairKind, DEFAULT_CRITICAL_TOL,
};
use crate::error::{KdvError, Result};
use crate::expsum::{kernel_function, BoundaryRow, ExpSum};
use crate::numerics::{brent, scan_roots};
use num_complex::Complex64 as C64;
use serde::Serialize;
use std::f64::consts::PI;

/// Largest elliptic eigenvalue modulus, `2√3/9`.
pub const ELLIPTIC_BOUND: f64 = 2.0 * 1.732_050_807_568_877_2 / 9.0;

/// Radius of the excluded neighbourhoods of the trivial roots `τ = ±√3/6`.
const TRIVIAL_EXCLUSION: f64 = 1e-9;

/// Largest accepted relative residual of the boundary row left out of the
/// kernel computation.
const CERTIFICATE_TOL: f64 = 1e-6;

const ROOT_XTOL: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Regime {
    Elliptic,
    Hyperbolic,
}

/// One eigenpair of `ℬ`.
#[derive(Clone, Debug, Serialize)]
pub struct EigenmodeB {
    pub index: i64,
    pub tau: f64,
    pub lambda: f64,
    pub regime: Regime,
    #[serde(rename = "L")]
    pub len: f64,
    /// Unit null vector of the boundary matrix, one entry per exponent.
    #[serde(skip)]
    pub r: [C64; 3],
    /// Normalization constant including the phase.
    #[serde(skip)]
    pub alpha: C64,
    #[serde(skip)]
    pub de_at_l: C64,
    /// Relative residual of the boundary row not used to build the mode.
    pub certificate: f64,
    #[serde(skip)]
    pub func: ExpSum,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumB {
    #[serde(rename = "L")]
    pub len: f64,
    /// Modes ordered by increasing `λ`, indices `−jmax..=−1, 1..=jmax`.
    pub modes: Vec<EigenmodeB>,
    #[serde(rename = "N_L")]
    pub n_l: usize,
    pub jmax: usize,
}

impl SpectrumB {
    /// The mode with index `j`.
    pub fn mode(&self, j: i64) -> Option<&EigenmodeB> {
        if j == 0 || j.unsigned_abs() as usize > self.jmax {
            return None;
        }
        let pos = if j < 0 {
            (self.jmax as i64 + j) as usize
        } else {
            self.jmax + j as usize - 1
        };
        self.modes.get(pos)
    }

    /// Elliptic index set `Λ_E`.
    pub fn lambda_e(&self) -> Vec<i64> {
        self.modes
            .iter()
            .filter(|m| m.regime == Regime::Elliptic)
            .map(|m| m.index)
            .collect()
    }

    /// Eigenvalues for indices `−k..=−1, 1..=k`.
    pub fn lambdas_upto(&self, k: usize) -> Vec<(i64, f64)> {
        let k = k.min(self.jmax) as i64;
        (-k..=k)
            .filter(|&j| j != 0)
            .map(|j| (j, self.mode(j).expect("index in range").lambda))
            .collect()
    }
}

impl EigenmodeB {
    pub fn eval(&self, x: f64) -> C64 {
        self.func.eval(x)
    }

    pub fn deriv(&self, x: f64, order: u32) -> C64 {
        self.func.deriv(x, order)
    }
}

fn check_elliptic(t: f64) -> Result<()> {
    if !(1.0 - 3.0 * t * t > 0.0) {
        return Err(KdvError::validation(format!("τ = {t} is not elliptic (need 3τ² < 1)")));
    }
    Ok(())
}

/// Elliptic characteristic function `F(t, L)`.
pub fn char_elliptic(t: f64, len: f64) -> Result<f64> {
    check_elliptic(t)?;
    Ok(char_elliptic_unchecked(t, len))
}

fn char_elliptic_unchecked(t: f64, len: f64) -> f64 {
    let s = (1.0 - 3.0 * t * t).sqrt();
    2.0 * s * (2.0 * t * len).cos() - (s + 3.0 * t) * ((s - t) * len).cos()
        + (3.0 * t - s) * ((s + t) * len).cos()
}

/// Hyperbolic characteristic function
/// `a cos(2tL) − 3t sin(tL) sinh(aL) − a cos(tL) cosh(aL)`, `a = √(3t² − 1)`.
pub fn char_hyperbolic(t: f64, len: f64) -> Result<f64> {
    if !(3.0 * t * t - 1.0 > 0.0) {
        return Err(KdvError::validation(format!("τ = {t} is not hyperbolic (need 3τ² > 1)")));
    }
    let a = (3.0 * t * t - 1.0).sqrt();
    Ok(a * (2.0 * t * len).cos()
        - 3.0 * t * (t * len).sin() * (a * len).sinh()
        - a * (t * len).cos() * (a * len).cosh())
}

/// `char_hyperbolic / (a cosh(aL))`, bounded for every `t`.
fn char_hyperbolic_scaled(t: f64, len: f64) -> f64 {
    let a = (3.0 * t * t - 1.0).sqrt();
    (2.0 * t * len).cos() / (a * len).cosh()
        - 3.0 * t * (t * len).sin() * (a * len).tanh() / a
        - (t * len).cos()
}

/// `λ = 2τ(4τ² − 1)`.
pub fn lambda_of_tau(t: f64) -> f64 {
    2.0 * t * (4.0 * t * t - 1.0)
}

/// The three real `τ` with `2τ(4τ²−1) = λ` for `|λ| ≤ 2√3/9`, ordered
/// largest, middle, smallest.
pub fn taus_of_lambda(lambda: f64) -> [f64; 3] {
    let arg = (3.0 * 3f64.sqrt() * lambda / 2.0).clamp(-1.0, 1.0);
    let phi = arg.acos();
    let c = 1.0 / 3f64.sqrt();
    [
        c * (phi / 3.0).cos(),
        c * (phi / 3.0 - 2.0 * PI / 3.0).cos(),
        c * (phi / 3.0 - 4.0 * PI / 3.0).cos(),
    ]
}

/// Principal complex square root.
pub fn csqrt(z: C64) -> C64 {
    z.sqrt()
}

/// Characteristic exponents `κ = iξ` of `ℰ''' + ℰ' + iλℰ = 0` for `λ = λ(τ)`.
pub fn exponents_b(tau: f64) -> [C64; 3] {
    let s = csqrt(C64::new(1.0 - 3.0 * tau * tau, 0.0));
    let i = C64::new(0.0, 1.0);
    [
        i * (2.0 * tau),
        i * (-tau + s),
        i * (-tau - s),
    ]
}

fn rows_b() -> [BoundaryRow; 3] {
    [
        BoundaryRow::ValueAt0,
        BoundaryRow::ValueAtL,
        BoundaryRow::SlopeJump,
    ]
}

/// Builds the normalized eigenfunction for a positive eigenvalue `λ(τ)`,
/// phased so that `ℰ'(L) ∈ iℝ₊`. When `ℰ'(L)` vanishes numerically the
/// phase makes `ℰ''(0)` real positive instead.
pub fn build_mode_b(index: i64, tau: f64, len: f64) -> Result<EigenmodeB> {
    let kappas = exponents_b(tau);
    let (raw, certificate) = kernel_function(&kappas, rows_b(), len);
    if !(certificate < CERTIFICATE_TOL) {
        return Err(KdvError::numerical(format!(
            "τ = {tau} at L = {len} is not an eigenvalue of ℬ (boundary residual {certificate:.3e})"
        )));
    }
    let norm = raw.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(KdvError::numerical(format!("degenerate eigenfunction at τ = {tau}")));
    }
    let unit = raw.scaled(C64::new(1.0 / norm, 0.0));
    let d = unit.deriv(len, 1);
    let phase = if d.norm() > 1e-10 {
        C64::new(0.0, 1.0) * d.conj() / d.norm()
    } else {
        let d2 = unit.deriv(0.0, 2);
        if d2.norm() > 0.0 {
            d2.conj() / d2.norm()
        } else {
            C64::new(1.0, 0.0)
        }
    };
    let func = unit.scaled(phase);
    let r = [raw.terms[0].coef, raw.terms[1].coef, raw.terms[2].coef];
    let regime = if 3.0 * tau * tau < 1.0 {
        Regime::Elliptic
    } else {
        Regime::Hyperbolic
    };
    Ok(EigenmodeB {
        index,
        tau,
        lambda: lambda_of_tau(tau),
        regime,
        len,
        r,
        alpha: phase / norm,
        de_at_l: func.deriv(len, 1),
        certificate,
        func,
    })
}

/// The sign partner `ℰ_{−j} = conj(ℰ_j)` with `λ_{−j} = −λ_j`.
pub fn mirror_mode(mode: &EigenmodeB) -> EigenmodeB {
    let func = mode.func.conj();
    EigenmodeB {
        index: -mode.index,
        tau: -mode.tau,
        lambda: -mode.lambda,
        regime: mode.regime,
        len: mode.len,
        r: [mode.r[0].conj(), mode.r[1].conj(), mode.r[2].conj()],
        alpha: mode.alpha.conj(),
        de_at_l: func.deriv(mode.len, 1),
        certificate: mode.certificate,
        func,
    }
}

/// Critical lengths within `radius` of `len`, with their pairs.
pub fn nearby_critical(len: f64, radius: f64) -> Vec<(f64, Vec<CriticalPair>)> {
    let lo = (3.0 * ((len - radius).max(0.0) / (2.0 * PI)).powi(2)).floor().max(1.0) as u64;
    let hi = (3.0 * ((len + radius) / (2.0 * PI)).powi(2)).ceil() as u64;
    let mut out = Vec::new();
    for n in lo..=hi {
        let pairs = solve_pairs(n);
        if pairs.is_empty() {
            continue;
        }
        let l0 = 2.0 * PI * (n as f64 / 3.0).sqrt();
        if (l0 - len).abs() <= radius {
            out.push((l0, pairs));
        }
    }
    out
}

/// Positive elliptic eigenvalues of `ℬ`, increasing.
pub fn elliptic_eigenvalues(len: f64) -> Result<Vec<f64>> {
    let edge = 3f64.sqrt() / 6.0;
    let top = 1.0 / 3f64.sqrt();
    let intervals = [
        (-top, -edge - TRIVIAL_EXCLUSION),
        (-edge + TRIVIAL_EXCLUSION, edge - TRIVIAL_EXCLUSION),
        (edge + TRIVIAL_EXCLUSION, top),
    ];
    let ic = 3.0 * (len / (2.0 * PI)).powi(2);
    let cells = 2000 + (200.0 * ic) as usize;

    // Dense windows around predicted eigenvalues near each close critical length.
    let mut extra: Vec<f64> = Vec::new();
    for (l0, pairs) in nearby_critical(len, 0.5) {
        let off = len - l0;
        for p in &pairs {
            let preds = perturbation_prediction(p, l0, len);
            let spread = preds
                .iter()
                .map(|v| (v - lambda_c(p)).abs())
                .fold(0.0, f64::max)
                + off.abs();
            for &lp in &preds {
                for sgn in [1.0, -1.0] {
                    for tk in taus_of_lambda((sgn * lp).clamp(-ELLIPTIC_BOUND, ELLIPTIC_BOUND)) {
                        let w = 5.0 * spread + 1e-7;
                        for i in 0..=400 {
                            extra.push(tk - w + 2.0 * w * i as f64 / 400.0);
                        }
                    }
                }
            }
        }
    }

    let mut lams = Vec::new();
    for &(a, b) in &intervals {
        let mut grid: Vec<f64> = (0..=cells)
            .map(|i| a + (b - a) * i as f64 / cells as f64)
            .collect();
        grid.extend(extra.iter().copied().filter(|&t| t > a && t < b));
        grid.sort_by(|x, y| x.partial_cmp(y).expect("finite grid"));
        grid.dedup();
        let f = |t: f64| char_elliptic_unchecked(t, len);
        for t in scan_roots(f, &grid, ROOT_XTOL)? {
            lams.push(lambda_of_tau(t));
        }
    }
    lams.retain(|&l| l > 0.0);
    lams.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    let mut out: Vec<f64> = Vec::new();
    for l in lams {
        match out.last() {
            Some(&prev) if (l - prev).abs() < 1e-9 => {}
            _ => out.push(l),
        }
    }
    Ok(out)
}

/// The first `count` hyperbolic `τ > 1/√3`, increasing.
pub fn hyperbolic_taus(len: f64, count: usize) -> Result<Vec<f64>> {
    let start = 1.0 / 3f64.sqrt() + TRIVIAL_EXCLUSION;
    let step = PI / (16.0 * len);
    let f = |t: f64| char_hyperbolic_scaled(t, len);
    let mut out = Vec::new();
    let mut a = start;
    let mut fa = f(a);
    let limit = 16 * (count + 8) + 64;
    for _ in 0..limit {
        if out.len() >= count {
            break;
        }
        let b = a + step;
        let fb = f(b);
        if fa == 0.0 {
            out.push(a);
        } else if fa * fb < 0.0 {
            out.push(brent(f, a, b, ROOT_XTOL)?);
        }
        a = b;
        fa = fb;
    }
    if out.len() < count {
        return Err(KdvError::numerical(format!(
            "found only {} of {count} hyperbolic roots below τ = {a}",
            out.len()
        )));
    }
    Ok(out)
}

/// Eigenvalues and eigenfunctions of `ℬ` for indices `|j| ≤ jmax`.
pub fn full_spectrum(len: f64, jmax: usize) -> Result<SpectrumB> {
    if !(len > 0.0) || !len.is_finite() {
        return Err(KdvError::validation(format!("length must be positive, got {len}")));
    }
    if jmax == 0 {
        return Err(KdvError::validation("jmax must be at least 1"));
    }
    if classify_length(len, DEFAULT_CRITICAL_TOL)?.is_some() {
        return Err(KdvError::validation(format!(
            "L = {len} is a critical length: the spectrum of ℬ degenerates"
        )));
    }
    let ell = elliptic_eigenvalues(len)?;
    for w in ell.windows(2) {
        if w[1] - w[0] < 1e-12 {
            return Err(KdvError::numerical(format!(
                "eigenvalues {} and {} coincide: L = {len} is effectively critical",
                w[0], w[1]
            )));
        }
    }
    let n_l = ell.len();
    let mut taus: Vec<f64> = ell.iter().map(|&l| taus_of_lambda(l)[1]).collect();
    if jmax > n_l {
        taus.extend(hyperbolic_taus(len, jmax - n_l)?);
    }
    taus.truncate(jmax);
    let positive: Vec<EigenmodeB> = taus
        .iter()
        .enumerate()
        .map(|(i, &t)| build_mode_b(i as i64 + 1, t, len))
        .collect::<Result<_>>()?;
    let mut modes: Vec<EigenmodeB> = positive.iter().rev().map(mirror_mode).collect();
    modes.extend(positive);
    Ok(SpectrumB {
        len,
        modes,
        n_l,
        jmax,
    })
}

/// `ℰ_j(x)` for `x ∈ [0, L]`.
pub fn eval_eigenfunction(mode: &EigenmodeB, x: f64) -> Result<C64> {
    let slack = 1e-12 * mode.len.max(1.0);
    if !(x >= -slack && x <= mode.len + slack) {
        return Err(KdvError::validation(format!("position {x} outside [0, {}]", mode.len)));
    }
    Ok(mode.eval(x))
}

/// `ℰ'_j(L)`, which equals `ℰ'_j(0)`.
pub fn boundary_derivative(mode: &EigenmodeB) -> C64 {
    mode.de_at_l
}

/// Partial derivatives `(F_t, F_LL)` of the elliptic characteristic function.
pub fn char_elliptic_derivatives(t: f64, len: f64) -> (f64, f64) {
    let s = (1.0 - 3.0 * t * t).sqrt();
    let ds = -3.0 * t / s;
    let (a, b, c) = (2.0 * t, s - t, s + t);
    let f_t = 2.0 * ds * (a * len).cos() - 4.0 * s * len * (a * len).sin()
        - (ds + 3.0) * (b * len).cos()
        + (s + 3.0 * t) * (ds - 1.0) * len * (b * len).sin()
        + (3.0 - ds) * (c * len).cos()
        - (3.0 * t - s) * (ds + 1.0) * len * (c * len).sin();
    let f_ll = -2.0 * s * a * a * (a * len).cos() + (s + 3.0 * t) * b * b * (b * len).cos()
        - (3.0 * t - s) * c * c * (c * len).cos();
    (f_t, f_ll)
}

/// First-order (S1, S2) or second-order (S3) predictions of the elliptic
/// eigenvalues bifurcating from `λ_c` when `L` moves off `L₀`.
///
/// For S3 pairs `F_L` vanishes at the critical point while `F_t` does not, so
/// `τ(L) = τ_c − F_LL/(2F_t) (L − L₀)²` and `λ` follows through `λ'(τ_c)`.
pub fn perturbation_prediction(pair: &CriticalPair, l0: f64, len: f64) -> Vec<f64> {
    let (k, l) = (pair.k as f64, pair.l as f64);
    let n = pair.norm_form() as f64;
    let lc = lambda_c(pair);
    let d = len - l0;
    match pair.kind {
        PairKind::S1 | PairKind::S2 => {
            let drift = (k - l) * (k + 2.0 * l) * (2.0 * k + l) / (2.0 * PI * n * n);
            let split = d.abs() / (PI * n.sqrt());
            vec![lc - drift * d - split, lc - drift * d + split]
        }
        PairKind::S3 => vec![lc + s3_quadratic_coefficient(pair, l0) * d * d],
    }
}

/// Coefficient `c` in `λ(L) = λ_c + c (L − L₀)² + O(|L − L₀|³)` for an S3 pair.
pub fn s3_quadratic_coefficient(pair: &CriticalPair, l0: f64) -> f64 {
    let tc = PI * (2.0 * pair.k as f64 + pair.l as f64) / (3.0 * l0);
    let (f_t, f_ll) = char_elliptic_derivatives(tc, l0);
    let dlam = 24.0 * tc * tc - 2.0;
    -dlam * f_ll / (2.0 * f_t)
}

/// Rotation relating the perturbed eigenfunctions to `(𝒢, G̃)`.
#[derive(Clone, Debug, Serialize)]
pub struct Rotation {
    pub theta: f64,
    /// `[[−cos(3θ/2), −sin(3θ/2)], [sin(3θ/2), −cos(3θ/2)]]`.
    pub c_rot: [[f64; 2]; 2],
    /// The same matrix from the explicit `C₁±, C₂±` expressions.
    pub c_explicit: [[f64; 2]; 2],
    /// Largest entrywise difference between the two forms.
    pub agreement: f64,
    /// Largest entry of `C_Rotᵀ C_Rot − I`.
    pub orthogonality_defect: f64,
}

pub fn rotation_matrix(pair: &CriticalPair) -> Result<Rotation> {
    if pair.kind == PairKind::S3 {
        return Err(KdvError::validation(format!(
            "pair ({}, {}) has no Type 2 eigenfunction and no rotation structure",
            pair.k, pair.l
        )));
    }
    let l0 = pair.length();
    let (k, l) = (pair.k as f64, pair.l as f64);
    let s3 = 3f64.sqrt();
    let theta = (PI * (k - l) / (s3 * l0)).acos();
    let (s, c) = (1.5 * theta).sin_cos();
    let c_rot = [[-c, -s], [s, -c]];

    let explicit = |sign: f64| {
        let root = (6.0 * l0 * l0 + sign * 2.0 * s3 * PI * l0 * (k - l)).sqrt();
        let c1 = -(-2.0 * PI * PI * (k * k + 4.0 * k * l + l * l) + sign * s3 * PI * l0 * (k - l))
            / (s3 * l0 * root);
        let c2 = -(PI * (k + l) * (2.0 * PI * (k - l) + sign * s3 * l0)) / (l0 * root);
        [c1, c2]
    };
    let c_explicit = [explicit(1.0), explicit(-1.0)];
    let mut agreement = 0.0f64;
    for i in 0..2 {
        for j in 0..2 {
            agreement = agreement.max((c_rot[i][j] - c_explicit[i][j]).abs());
        }
    }
    let mut orthogonality_defect = 0.0f64;
    for i in 0..2 {
        for j in 0..2 {
            let g = c_rot[0][i] * c_rot[0][j] + c_rot[1][i] * c_rot[1][j];
            let id = if i == j { 1.0 } else { 0.0 };
            orthogonality_defect = orthogonality_defect.max((g - id).abs());
        }
    }
    Ok(Rotation {
        theta,
        c_rot,
        c_explicit,
        agreement,
        orthogonality_defect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_roots_vanish() {
        let e = 3f64.sqrt() / 6.0;
        assert!(char_elliptic(e, 3.3).unwrap().abs() < 1e-14);
        assert!(char_elliptic(-e, 7.0).unwrap().abs() < 1e-14);
        assert!(char_elliptic(0.6, 1.0).is_err());
        assert!(char_hyperbolic(0.1, 1.0).is_err());
    }

    #[test]
    fn tau_lambda_round_trip() {
        for &l in &[-0.38, -0.1, 0.0, 0.2, 0.384] {
            for t in taus_of_lambda(l) {
                assert!((lambda_of_tau(t) - l).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn critical_length_is_rejected() {
        assert!(full_spectrum(2.0 * PI, 4).is_err());
    }
}
