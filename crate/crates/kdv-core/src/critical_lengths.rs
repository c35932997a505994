//! Critical lengths `L₀ = 2π √((k² + kl + l²)/3)`: integer enumeration of the
//! pairs `(k, l)`, classification into the three classes, the critical
//! eigenvalues and the closed-form Type 1 / Type 2 eigenfunctions.

use crate::error::{KdvError, Result};
use crate::expsum::ExpSum;
use num_complex::Complex64 as C64;
use serde::Serialize;
use std::f64::consts::PI;

/// Relative tolerance used to snap `3 (L₀/2π)²` to an integer.
pub const DEFAULT_CRITICAL_TOL: f64 = 1e-9;

/// Kind of an unreachable pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PairKind {
    /// `k = l`
    S1,
    /// `k ≡ l (mod 3)`, `k ≠ l`
    S2,
    /// `k ≢ l (mod 3)`
    S3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CriticalPair {
    pub k: u64,
    pub l: u64,
    pub kind: PairKind,
}

/// Class of a critical length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LengthClass {
    N1,
    N2,
    N3,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriticalLength {
    #[serde(rename = "L0")]
    pub l0: f64,
    pub index_ic: u64,
    pub pairs: Vec<CriticalPair>,
    pub class: LengthClass,
    #[serde(rename = "N0")]
    pub n0: usize,
    /// One `λ_c ≥ 0` per pair. The sign partner of a nonzero value is implied.
    pub critical_eigenvalues: Vec<f64>,
}

impl CriticalPair {
    /// Builds a pair, ordering the entries so that `k ≥ l`.
    pub fn new(a: u64, b: u64) -> Result<Self> {
        if a == 0 || b == 0 {
            return Err(KdvError::validation("pair entries must be positive integers"));
        }
        let (k, l) = if a >= b { (a, b) } else { (b, a) };
        let kind = if k == l {
            PairKind::S1
        } else if (k - l) % 3 == 0 {
            PairKind::S2
        } else {
            PairKind::S3
        };
        Ok(CriticalPair { k, l, kind })
    }

    /// `k² + kl + l²`.
    pub fn norm_form(&self) -> u64 {
        self.k * self.k + self.k * self.l + self.l * self.l
    }

    /// The critical length carried by this pair.
    pub fn length(&self) -> f64 {
        2.0 * PI * (self.norm_form() as f64 / 3.0).sqrt()
    }

    /// Whether a Type 2 eigenfunction exists for this pair.
    pub fn has_type2(&self) -> bool {
        self.kind != PairKind::S3
    }

    /// The three real frequencies `(a, b, c)` with Type 1 eigenfunction
    /// `−l e^{iax} − k e^{−ibx} + (k+l) e^{icx}`.
    pub fn frequencies(&self) -> (f64, f64, f64) {
        let (k, l) = (self.k as f64, self.l as f64);
        let s = 3.0 * (self.norm_form() as f64).sqrt() / 3f64.sqrt();
        ((2.0 * k + l) / s, (k + 2.0 * l) / s, (l - k) / s)
    }
}

fn isqrt(n: u64) -> u64 {
    let mut r = (n as f64).sqrt() as u64;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// All pairs `k ≥ l ≥ 1` with `k² + kl + l² = n`, in increasing `k`.
///
/// For each `l` the equation is a quadratic in `k` whose discriminant
/// `4n − 3l²` must be a perfect square, so no floating point is involved.
pub fn solve_pairs(n: u64) -> Vec<CriticalPair> {
    let mut out = Vec::new();
    let mut l = 1u64;
    while 3 * l * l <= n {
        let disc = 4 * n - 3 * l * l;
        let r = isqrt(disc);
        if r * r == disc && r > l && (r - l) % 2 == 0 {
            let k = (r - l) / 2;
            if k >= l {
                out.push(CriticalPair::new(k, l).expect("positive entries"));
            }
        }
        l += 1;
    }
    out.sort_by_key(|p| p.k);
    out
}

/// `3 (L/2π)²`.
pub fn index_ic(l0: f64) -> f64 {
    3.0 * (l0 / (2.0 * PI)).powi(2)
}

/// Classifies `l0`, returning `None` when it is not a critical length.
pub fn classify_length(l0: f64, tol: f64) -> Result<Option<CriticalLength>> {
    if !(l0 > 0.0) || !l0.is_finite() {
        return Err(KdvError::validation(format!("length must be positive, got {l0}")));
    }
    if !(tol > 0.0) {
        return Err(KdvError::validation(format!("tolerance must be positive, got {tol}")));
    }
    let ic = index_ic(l0);
    let n = ic.round();
    if n < 1.0 || (ic - n).abs() > tol * n {
        return Ok(None);
    }
    let n = n as u64;
    let pairs = solve_pairs(n);
    if pairs.is_empty() {
        return Ok(None);
    }
    let has_s1 = pairs.iter().any(|p| p.kind == PairKind::S1);
    let class = if pairs.iter().all(|p| p.kind == PairKind::S1) {
        LengthClass::N1
    } else if pairs.iter().all(|p| p.kind == PairKind::S3) {
        LengthClass::N2
    } else {
        LengthClass::N3
    };
    let n0 = 2 * pairs.iter().filter(|p| p.kind != PairKind::S1).count() + usize::from(has_s1);
    let critical_eigenvalues = pairs.iter().map(lambda_c).collect();
    Ok(Some(CriticalLength {
        l0: 2.0 * PI * (n as f64 / 3.0).sqrt(),
        index_ic: n,
        pairs,
        class,
        n0,
        critical_eigenvalues,
    }))
}

/// `λ_c = (2k+l)(k−l)(2l+k) / (3√3 (k²+kl+l²)^{3/2})`.
pub fn lambda_c(pair: &CriticalPair) -> f64 {
    let (k, l) = (pair.k as f64, pair.l as f64);
    let n = pair.norm_form() as f64;
    (2.0 * k + l) * (k - l) * (2.0 * l + k) / (3.0 * 3f64.sqrt() * n.powf(1.5))
}

fn check_position(x: f64, l0: f64) -> Result<()> {
    let slack = 1e-12 * l0.max(1.0);
    if !(x >= -slack && x <= l0 + slack) {
        return Err(KdvError::validation(format!("position {x} outside [0, {l0}]")));
    }
    Ok(())
}

fn check_length(pair: &CriticalPair, l0: f64) -> Result<()> {
    let expect = pair.length();
    if (l0 - expect).abs() > 1e-8 * expect {
        return Err(KdvError::validation(format!(
            "length {l0} is not the critical length {expect} of pair ({}, {})",
            pair.k, pair.l
        )));
    }
    Ok(())
}

/// The unit-norm Type 1 eigenfunction `𝒢` as an exponential sum.
pub fn type1_expsum(pair: &CriticalPair, l0: f64) -> Result<ExpSum> {
    check_length(pair, l0)?;
    let (a, b, c) = pair.frequencies();
    let scale = PI * (2.0 / (3.0 * l0.powi(3))).sqrt();
    let (k, l) = (pair.k as f64, pair.l as f64);
    Ok(ExpSum::new(
        &[C64::new(0.0, a), C64::new(0.0, -b), C64::new(0.0, c)],
        &[
            C64::new(-l * scale, 0.0),
            C64::new(-k * scale, 0.0),
            C64::new((k + l) * scale, 0.0),
        ],
        l0,
    ))
}

/// Type 1 eigenfunction `𝒢(x)`: zero value and zero slope at both ends.
pub fn type1_eigenfunction(pair: &CriticalPair, l0: f64, x: f64) -> Result<C64> {
    check_position(x, l0)?;
    Ok(type1_expsum(pair, l0)?.eval(x))
}

/// The unit-norm Type 2 eigenfunction `𝒢̃` as an exponential sum.
pub fn type2_expsum(pair: &CriticalPair, l0: f64) -> Result<ExpSum> {
    if !pair.has_type2() {
        return Err(KdvError::validation(format!(
            "pair ({}, {}) has k ≢ l (mod 3): no Type 2 eigenfunction",
            pair.k, pair.l
        )));
    }
    check_length(pair, l0)?;
    let (a, b, _) = pair.frequencies();
    let s = 1.0 / (2.0 * l0).sqrt();
    Ok(ExpSum::new(
        &[C64::new(0.0, a), C64::new(0.0, -b)],
        &[C64::new(s, 0.0), C64::new(-s, 0.0)],
        l0,
    ))
}

/// Type 2 eigenfunction `𝒢̃(x)`.
pub fn type2_eigenfunction(pair: &CriticalPair, l0: f64, x: f64) -> Result<C64> {
    check_position(x, l0)?;
    Ok(type2_expsum(pair, l0)?.eval(x))
}

/// Gram–Schmidt coefficients `(c₁, c₂)` with `G̃ = c₁ 𝒢 + c₂ 𝒢̃` unit and
/// orthogonal to `𝒢`.
pub fn orthogonal_type2_coefficients(pair: &CriticalPair, l0: f64) -> (f64, f64) {
    let (k, l) = (pair.k as f64, pair.l as f64);
    (-(k - l) / (3f64.sqrt() * (k + l)), l0 / (PI * (k + l)))
}

/// `G̃` as an exponential sum.
pub fn orthogonal_type2_expsum(pair: &CriticalPair, l0: f64) -> Result<ExpSum> {
    let g = type1_expsum(pair, l0)?;
    let gt = type2_expsum(pair, l0)?;
    let (c1, c2) = orthogonal_type2_coefficients(pair, l0);
    Ok(g.scaled(C64::new(c1, 0.0)).add(&gt.scaled(C64::new(c2, 0.0))))
}

/// `G̃(x)`.
pub fn orthogonal_type2_eigenfunction(pair: &CriticalPair, l0: f64, x: f64) -> Result<C64> {
    check_position(x, l0)?;
    Ok(orthogonal_type2_expsum(pair, l0)?.eval(x))
}

/// Closed-form `⟨𝒢, 𝒢̃⟩ = π(k−l)/(√3 L₀)`.
pub fn type_overlap(pair: &CriticalPair, l0: f64) -> f64 {
    PI * (pair.k as f64 - pair.l as f64) / (3f64.sqrt() * l0)
}

/// Closed-form boundary slope `𝒢̃'(0) = 𝒢̃'(L₀) = i√2 π(k+l)/L₀^{3/2}`.
pub fn type2_boundary_slope(pair: &CriticalPair, l0: f64) -> C64 {
    C64::new(0.0, 2f64.sqrt() * PI * (pair.k + pair.l) as f64 / l0.powf(1.5))
}
