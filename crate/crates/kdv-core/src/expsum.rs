//! Finite exponential sums on an interval `[0, L]`.
//!
//! Every eigenfunction and boundary lift used by the crate solves a constant
//! coefficient third order ODE, so it is a combination of three exponentials
//! `e^{κ x}`. Each term is stored anchored at the endpoint where it is largest:
//! a term with `Re κ > 0` is written `c e^{κ (x - L)}` and any other term is
//! written `c e^{κ x}`. With this anchoring no term exceeds `|c|` anywhere on
//! the interval, so evaluation never overflows even for strongly hyperbolic
//! modes, and products of two terms can be integrated in closed form.

use num_complex::Complex64 as C64;

/// One term `coef * exp(kappa * (x - shift))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpTerm {
    pub coef: C64,
    pub kappa: C64,
    pub shift: f64,
}

/// A sum of anchored exponential terms on `[0, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpSum {
    pub terms: Vec<ExpTerm>,
    pub len: f64,
}

/// Anchor point for an exponent on `[0, len]`.
pub fn anchor(kappa: C64, len: f64) -> f64 {
    if kappa.re > 0.0 {
        len
    } else {
        0.0
    }
}

/// `e^z - 1` without cancellation for small `|z|`.
pub fn cexpm1(z: C64) -> C64 {
    if z.norm() < 1e-5 {
        // Taylor series, enough terms for full precision at this radius.
        let mut term = z;
        let mut sum = z;
        for n in 2..8 {
            term *= z / n as f64;
            sum += term;
        }
        return sum;
    }
    let em1 = z.re.exp_m1();
    let (s, c) = z.im.sin_cos();
    let half = (z.im * 0.5).sin();
    C64::new(em1 * c - 2.0 * half * half, z.re.exp() * s)
}

/// `∫_0^len exp(alpha + k x) dx`, assuming `Re alpha ≤ 0` and
/// `Re(alpha + k len) ≤ 0` up to rounding.
pub fn integrate_exp(alpha: C64, k: C64, len: f64) -> C64 {
    let z = k * len;
    if z.norm() < 1e-3 {
        let mut term = C64::new(1.0, 0.0);
        let mut sum = term;
        for n in 1..16 {
            term *= z / (n as f64 + 1.0);
            sum += term;
        }
        return alpha.exp() * len * sum;
    }
    if z.re <= 0.0 {
        alpha.exp() * cexpm1(z) / k
    } else {
        -(alpha + z).exp() * cexpm1(-z) / k
    }
}

impl ExpSum {
    /// Builds a sum from exponents and coefficients of the anchored terms.
    pub fn new(kappas: &[C64], coefs: &[C64], len: f64) -> Self {
        let terms = kappas
            .iter()
            .zip(coefs)
            .map(|(&kappa, &coef)| ExpTerm {
                coef,
                kappa,
                shift: anchor(kappa, len),
            })
            .collect();
        ExpSum { terms, len }
    }

    pub fn zero(len: f64) -> Self {
        ExpSum {
            terms: Vec::new(),
            len,
        }
    }

    /// Value at `x`.
    pub fn eval(&self, x: f64) -> C64 {
        self.deriv(x, 0)
    }

    /// `order`-th derivative at `x`.
    pub fn deriv(&self, x: f64, order: u32) -> C64 {
        self.terms
            .iter()
            .map(|t| t.coef * t.kappa.powu(order) * (t.kappa * (x - t.shift)).exp())
            .sum()
    }

    /// Multiplies every coefficient by `s`.
    pub fn scaled(&self, s: C64) -> Self {
        let mut out = self.clone();
        for t in &mut out.terms {
            t.coef *= s;
        }
        out
    }

    /// Pointwise complex conjugate.
    pub fn conj(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.terms {
            t.coef = t.coef.conj();
            t.kappa = t.kappa.conj();
        }
        out
    }

    /// The function `x ↦ f(len - x)`.
    pub fn reflected(&self) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| ExpTerm {
                coef: t.coef,
                kappa: -t.kappa,
                shift: self.len - t.shift,
            })
            .collect();
        ExpSum {
            terms,
            len: self.len,
        }
    }

    /// Sum of two exponential sums on the same interval.
    pub fn add(&self, other: &ExpSum) -> Self {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        ExpSum {
            terms,
            len: self.len,
        }
    }

    /// `∫_0^len f(x) conj(g(x)) dx` evaluated in closed form.
    pub fn inner(&self, other: &ExpSum) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for a in &self.terms {
            for b in &other.terms {
                let kb = b.kappa.conj();
                let k = a.kappa + kb;
                let alpha = -a.kappa * a.shift - kb * b.shift;
                acc += a.coef * b.coef.conj() * integrate_exp(alpha, k, self.len);
            }
        }
        acc
    }

    /// L² norm on `[0, len]`.
    pub fn norm(&self) -> f64 {
        self.inner(self).re.max(0.0).sqrt()
    }

    /// Duality pairing `∫_0^len f(x) conj(g(len - x)) dx`.
    pub fn dual_pair(&self, other: &ExpSum) -> C64 {
        self.inner(&other.reflected())
    }

    /// Samples `f` at `n + 1` uniform points of `[0, len]`.
    pub fn sample(&self, n: usize) -> Vec<C64> {
        let h = self.len / n as f64;
        (0..=n).map(|i| self.eval(i as f64 * h)).collect()
    }
}

/// Boundary functional applied to one anchored exponential.
#[derive(Clone, Copy, Debug)]
pub enum BoundaryRow {
    /// `f(0)`
    ValueAt0,
    /// `f(L)`
    ValueAtL,
    /// `f'(L)`
    SlopeAtL,
    /// `f'(0) - f'(L)`
    SlopeJump,
}

impl BoundaryRow {
    pub fn apply(self, kappa: C64, len: f64) -> C64 {
        let s = anchor(kappa, len);
        let at0 = (kappa * (0.0 - s)).exp();
        let at_l = (kappa * (len - s)).exp();
        match self {
            BoundaryRow::ValueAt0 => at0,
            BoundaryRow::ValueAtL => at_l,
            BoundaryRow::SlopeAtL => kappa * at_l,
            BoundaryRow::SlopeJump => kappa * (at0 - at_l),
        }
    }
}

fn cross(a: &[C64; 3], b: &[C64; 3]) -> [C64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn cnorm3(v: &[C64; 3]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Null vector of a numerically singular 3×3 matrix, given by rows.
///
/// Uses the cross product of the pair of rows with the largest cross
/// product, which is exact for a rank-two matrix and robust when one row is
/// nearly dependent on another. Returns the vector together with the
/// relative residual of the remaining row.
pub fn null_vector(rows: &[[C64; 3]; 3]) -> ([C64; 3], f64) {
    let pairs = [(0usize, 1usize, 2usize), (0, 2, 1), (1, 2, 0)];
    let mut best = ([C64::new(0.0, 0.0); 3], 0.0, 2usize);
    for &(i, j, k) in &pairs {
        let c = cross(&rows[i], &rows[j]);
        let n = cnorm3(&c);
        if n > best.1 {
            best = (c, n, k);
        }
    }
    let (v, n, k) = best;
    if n == 0.0 {
        return (v, f64::INFINITY);
    }
    let v = [v[0] / n, v[1] / n, v[2] / n];
    let res: C64 = (0..3).map(|m| rows[k][m] * v[m]).sum();
    let scale = cnorm3(&rows[k]).max(1e-300);
    (v, res.norm() / scale)
}

/// Builds the exponential sum in the kernel of three boundary functionals.
///
/// Returns the (unnormalized) function and the relative residual of the
/// boundary row not used to build it, a certificate that the exponents
/// really belong to an eigenvalue.
pub fn kernel_function(kappas: &[C64; 3], rows: [BoundaryRow; 3], len: f64) -> (ExpSum, f64) {
    let mut m = [[C64::new(0.0, 0.0); 3]; 3];
    for (r, row) in rows.iter().enumerate() {
        for c in 0..3 {
            m[r][c] = row.apply(kappas[c], len);
        }
    }
    let (v, res) = null_vector(&m);
    (ExpSum::new(kappas, &v, len), res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inner_product_matches_simpson() {
        let len = 2.5;
        let f = ExpSum::new(
            &[C64::new(0.3, 2.0), C64::new(-1.2, 0.5), C64::new(0.0, -1.0)],
            &[C64::new(1.0, 0.5), C64::new(-0.3, 0.2), C64::new(0.7, 0.0)],
            len,
        );
        let g = ExpSum::new(
            &[C64::new(2.0, 0.0), C64::new(-0.2, 3.0)],
            &[C64::new(0.4, -0.1), C64::new(1.0, 1.0)],
            len,
        );
        let n = 20000;
        let h = len / n as f64;
        let mut s = C64::new(0.0, 0.0);
        for i in 0..=n {
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let x = i as f64 * h;
            s += w * f.eval(x) * g.eval(x).conj();
        }
        s *= h / 3.0;
        assert!((s - f.inner(&g)).norm() < 1e-10);
    }

    #[test]
    fn small_exponent_integral_is_continuous() {
        // Both sides of the series cutoff at |kL| = 1e-3 against expm1.
        for k in [1e-6, 4.9999e-4, 5.0001e-4, 3e-3] {
            let got = integrate_exp(C64::new(-0.1, 0.0), C64::new(k, 0.0), 2.0);
            let want = (-0.1f64).exp() * (2.0 * k).exp_m1() / k;
            assert!((got.re - want).abs() < 1e-14 * want, "k = {k}");
            assert!(got.im.abs() < 1e-16);
        }
    }

    #[test]
    fn reflection_is_an_involution() {
        let f = ExpSum::new(
            &[C64::new(1.5, 0.2), C64::new(-0.7, 1.0)],
            &[C64::new(1.0, 0.0), C64::new(0.0, 2.0)],
            3.0,
        );
        let r = f.reflected();
        for &x in &[0.0, 0.4, 1.7, 3.0] {
            assert!((r.eval(x) - f.eval(3.0 - x)).norm() < 1e-13);
            assert!((r.reflected().eval(x) - f.eval(x)).norm() < 1e-13);
        }
    }

    #[test]
    fn cexpm1_agrees_with_exp() {
        for &z in &[C64::new(1e-7, 2e-7), C64::new(0.3, -1.1), C64::new(-4.0, 2.0)] {
            assert!((cexpm1(z) - (z.exp() - 1.0)).norm() < 1e-14 * (1.0 + z.exp().norm()));
        }
    }
}
