//! Boundary lifts: the zero-mode lift `h` and the modulated functions `h_μ`
//! solving `h''' + h' = μh`, `h(0) = h(L) = 0`, `h'(L) − h'(0) = 1`.

use crate::error::{KdvError, Result};
use crate::expsum::{BoundaryRow, ExpSum};
use crate::numerics::solve_complex;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::Serialize;

/// Largest accepted condition number of the 3×3 boundary system.
const MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Debug, Serialize)]
pub struct ModulatedFunction {
    pub mu: f64,
    #[serde(rename = "L")]
    pub len: f64,
    /// Real root of `ω³ + ω = μ`; zero for the zero-mode lift.
    pub omega: f64,
    #[serde(skip)]
    pub func: ExpSum,
}

impl ModulatedFunction {
    /// `h(x)`.
    pub fn value(&self, x: f64) -> f64 {
        self.deriv(x, 0)
    }

    /// `h^{(order)}(x)`.
    pub fn deriv(&self, x: f64, order: u32) -> f64 {
        if self.mu == 0.0 {
            // Real trigonometric form (cos(L/2) − cos(x − L/2)) / (2 sin(L/2)).
            let half = 0.5 * self.len;
            let phase = x - half + order as f64 * std::f64::consts::FRAC_PI_2;
            let base = if order == 0 { half.cos() } else { 0.0 };
            (base - phase.cos()) / (2.0 * half.sin())
        } else {
            self.func.deriv(x, order).re
        }
    }

    /// `(h'(0), h'(L))`.
    pub fn boundary(&self) -> (f64, f64) {
        (self.deriv(0.0, 1), self.deriv(self.len, 1))
    }
}

/// The real root of `ω³ + ω = μ`: Cardano's formula polished by Newton.
pub fn omega_of_mu(mu: f64) -> f64 {
    let q = mu / 2.0;
    let r = (q * q + 1.0 / 27.0).sqrt();
    let mut w = (q + r).cbrt() + (q - r).cbrt();
    for _ in 0..4 {
        let f = w * w * w + w - mu;
        w -= f / (3.0 * w * w + 1.0);
    }
    w
}

fn check_len(len: f64) -> Result<()> {
    if !(len > 0.0) || !len.is_finite() {
        return Err(KdvError::validation(format!("length must be positive, got {len}")));
    }
    Ok(())
}

/// The zero-mode lift `h` (the case `μ = 0`).
pub fn solve_h(len: f64) -> Result<ModulatedFunction> {
    check_len(len)?;
    let s = (0.5 * len).sin();
    if s.abs() < 1e-8 {
        return Err(KdvError::validation(format!(
            "L = {len} is too close to a multiple of 2π: |sin(L/2)| = {:.3e}",
            s.abs()
        )));
    }
    let c = (0.5 * len).cos();
    let e = C64::new(0.0, 0.5 * len).exp();
    let func = ExpSum::new(
        &[C64::new(0.0, 0.0), C64::new(0.0, 1.0), C64::new(0.0, -1.0)],
        &[
            C64::new(c / (2.0 * s), 0.0),
            -e.conj() / (4.0 * s),
            -e / (4.0 * s),
        ],
        len,
    );
    Ok(ModulatedFunction {
        mu: 0.0,
        len,
        omega: 0.0,
        func,
    })
}

/// The modulated function `h_μ` for `μ > 0`.
pub fn solve_h_mu(mu: f64, len: f64) -> Result<ModulatedFunction> {
    check_len(len)?;
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(KdvError::validation(format!("μ must be positive, got {mu}")));
    }
    let w = omega_of_mu(mu);
    let q = (4.0 + 3.0 * w * w).sqrt() / 2.0;
    let kappas = [
        C64::new(w, 0.0),
        C64::new(-w / 2.0, q),
        C64::new(-w / 2.0, -q),
    ];
    let rows = [
        BoundaryRow::ValueAt0,
        BoundaryRow::ValueAtL,
        BoundaryRow::SlopeJump,
    ];
    let a = DMatrix::from_fn(3, 3, |r, c| rows[r].apply(kappas[c], len));
    // SlopeJump measures f'(0) − f'(L); the jump condition asks for −1 there.
    let b = DVector::from_vec(vec![C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(-1.0, 0.0)]);
    let (coef, cond) = solve_complex(&a, &b)?;
    if cond > MAX_CONDITION {
        return Err(KdvError::numerical(format!(
            "non-generic μ = {mu} at L = {len}: boundary system condition number {cond:.3e}"
        )));
    }
    let func = ExpSum::new(&kappas, coef.as_slice(), len);
    Ok(ModulatedFunction {
        mu,
        len,
        omega: w,
        func,
    })
}

/// Dispatches to [`solve_h`] for `μ = 0` and [`solve_h_mu`] otherwise.
pub fn modulated(mu: f64, len: f64) -> Result<ModulatedFunction> {
    if mu == 0.0 {
        solve_h(len)
    } else {
        solve_h_mu(mu, len)
    }
}

/// `(h'_μ(0), h'_μ(L))`.
pub fn h_mu_boundary(mu: f64, len: f64) -> Result<(f64, f64)> {
    Ok(modulated(mu, len)?.boundary())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardano_root() {
        assert!((omega_of_mu(2.0) - 1.0).abs() < 1e-15);
        assert!((omega_of_mu(1e9).powi(3) + omega_of_mu(1e9) - 1e9).abs() < 1e-5);
    }

    #[test]
    fn zero_mode_trig_form_matches_exponentials() {
        let h = solve_h(7.3).unwrap();
        for &x in &[0.0, 1.1, 3.6, 7.3] {
            for order in 0..4 {
                let a = h.deriv(x, order);
                let b = h.func.deriv(x, order);
                assert!((a - b.re).abs() < 1e-13 && b.im.abs() < 1e-13);
            }
        }
    }

    #[test]
    fn near_two_pi_multiple_is_rejected() {
        assert!(solve_h(4.0 * std::f64::consts::PI).is_err());
    }
}
