//! Small numerical building blocks: bracketing root search, quadrature rules,
//! least-squares slopes and dense complex solves.

use crate::error::{KdvError, Result};
use gauss_quad::GaussLegendre;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use roots::{find_root_brent, Convergency};
use std::sync::OnceLock;

/// Stops Brent's method on the bracket width only, never on the size of
/// `f`, because several characteristic functions are tiny near clustered roots.
struct BracketWidth {
    xtol: f64,
    max_iter: usize,
}

impl Convergency<f64> for BracketWidth {
    fn is_root_found(&mut self, y: f64) -> bool {
        y == 0.0
    }
    fn is_converged(&mut self, x1: f64, x2: f64) -> bool {
        (x1 - x2).abs() <= self.xtol * x1.abs().max(x2.abs()) + 1e-300
    }
    fn is_iteration_limit_reached(&mut self, iter: usize) -> bool {
        iter >= self.max_iter
    }
}

/// Root of `f` in the bracket `[a, b]` by Brent's method, with relative
/// bracket tolerance `xtol` (raised to a few ulps if smaller).
pub fn brent<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, xtol: f64) -> Result<f64> {
    let mut conv = BracketWidth {
        xtol: xtol.max(4.0 * f64::EPSILON),
        max_iter: 2000,
    };
    find_root_brent(a, b, f, &mut conv)
        .map_err(|e| KdvError::numerical(format!("root search in [{a}, {b}] failed: {e:?}")))
}

/// All roots of `f` bracketed by sign changes on the sorted `grid`.
pub fn scan_roots<F: Fn(f64) -> f64>(f: F, grid: &[f64], xtol: f64) -> Result<Vec<f64>> {
    let vals: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let mut out = Vec::new();
    for i in 0..grid.len().saturating_sub(1) {
        let (ya, yb) = (vals[i], vals[i + 1]);
        if ya == 0.0 {
            out.push(grid[i]);
        } else if ya * yb < 0.0 {
            out.push(brent(&f, grid[i], grid[i + 1], xtol)?);
        }
    }
    Ok(out)
}

/// Composite Simpson weights for `n + 1` equispaced samples with spacing `h`.
/// An odd number of panels closes with the three-eighths rule.
pub fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    assert!(n >= 2, "Simpson's rule needs at least two panels");
    let mut w = vec![0.0; n + 1];
    let even_end = if n % 2 == 0 { n } else { n - 3 };
    let mut i = 0;
    while i + 2 <= even_end {
        w[i] += h / 3.0;
        w[i + 1] += 4.0 * h / 3.0;
        w[i + 2] += h / 3.0;
        i += 2;
    }
    if n % 2 == 1 {
        let s = even_end;
        let c = 3.0 * h / 8.0;
        w[s] += c;
        w[s + 1] += 3.0 * c;
        w[s + 2] += 3.0 * c;
        w[s + 3] += c;
    }
    w
}

/// Composite Simpson integral of complex samples.
pub fn simpson_c(values: &[C64], h: f64) -> C64 {
    let w = simpson_weights(values.len() - 1, h);
    values.iter().zip(&w).map(|(v, w)| v * w).sum()
}

/// Composite Simpson integral of real samples.
pub fn simpson(values: &[f64], h: f64) -> f64 {
    let w = simpson_weights(values.len() - 1, h);
    values.iter().zip(&w).map(|(v, w)| v * w).sum()
}

/// Trapezoidal integral of real samples.
pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    h * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}

fn gauss_legendre_32() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        GaussLegendre::new(32)
            .expect("degree 32 is a valid Gauss-Legendre rule")
            .as_node_weight_pairs()
            .to_vec()
    })
}

/// Composite 32-point Gauss–Legendre integral of a complex function.
pub fn gauss_c<F: Fn(f64) -> C64>(f: F, a: f64, b: f64, panels: usize) -> C64 {
    let rule = gauss_legendre_32();
    let h = (b - a) / panels as f64;
    let mut acc = C64::new(0.0, 0.0);
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        for &(x, w) in rule {
            acc += w * f(mid + 0.5 * h * x);
        }
    }
    acc * (0.5 * h)
}

/// Composite 32-point Gauss–Legendre integral of a real function.
pub fn gauss<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    gauss_c(|x| C64::new(f(x), 0.0), a, b, panels).re
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Slope of `log|y|` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.abs().ln()).collect();
    linear_fit(&lx, &ly).0
}

/// Solution of a dense complex linear system with its 2-norm condition number.
pub fn solve_complex(a: &DMatrix<C64>, b: &DVector<C64>) -> Result<(DVector<C64>, f64)> {
    let sv = a.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > 1e14 {
        return Err(KdvError::numerical(format!(
            "singular linear system (condition number {cond:.3e})"
        )));
    }
    let x = a
        .clone()
        .lu()
        .solve(b)
        .ok_or_else(|| KdvError::numerical("LU solve failed"))?;
    Ok((x, cond))
}

/// Solution of a dense real linear system with its 2-norm condition number.
pub fn solve_real(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let sv = a.clone().singular_values();
    let cond = if sv.min() > 0.0 { sv.max() / sv.min() } else { f64::INFINITY };
    if !cond.is_finite() || cond > 1e14 {
        return Err(KdvError::numerical(format!(
            "singular linear system (condition number {cond:.3e})"
        )));
    }
    let x = a
        .clone()
        .lu()
        .solve(b)
        .ok_or_else(|| KdvError::numerical("LU solve failed"))?;
    Ok((x, cond))
}

/// Finite-difference weights for derivatives `0..=m` at `x0` on the nodes
/// `xs` (Fornberg's recursion). Row `k` holds the weights of the `k`-th
/// derivative.
pub fn fd_weights(x0: f64, xs: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = xs.len();
    let mut c = vec![vec![0.0; n]; m + 1];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] *= c4 / c3;
        }
        c1 = c2;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_is_exact_for_cubics_with_odd_panels() {
        for n in [6usize, 7, 9] {
            let h = 2.0 / n as f64;
            let v: Vec<f64> = (0..=n).map(|i| (i as f64 * h).powi(3)).collect();
            assert!((simpson(&v, h) - 4.0).abs() < 1e-12, "n = {n}");
        }
    }

    #[test]
    fn brent_finds_clustered_roots_on_tiny_functions() {
        let f = |x: f64| 1e-20 * (x - 0.3);
        let r = brent(f, 0.0, 1.0, 1e-15).unwrap();
        assert!((r - 0.3).abs() < 1e-13);
    }

    #[test]
    fn gauss_integrates_oscillatory_function() {
        let v = gauss_c(|x| C64::new(0.0, 40.0 * x).exp(), 0.0, 1.0, 8);
        let exact = (C64::new(0.0, 40.0).exp() - 1.0) / C64::new(0.0, 40.0);
        assert!((v - exact).norm() < 1e-13);
    }

    #[test]
    fn fornberg_weights_differentiate_polynomials() {
        let xs: Vec<f64> = (0..7).map(|i| i as f64 * 0.1).collect();
        let w = fd_weights(0.0, &xs, 4);
        // f = x⁴ + x² has second derivative 2 and fourth derivative 24 at 0.
        let f: Vec<f64> = xs.iter().map(|x| x.powi(4) + x * x).collect();
        let d2: f64 = w[2].iter().zip(&f).map(|(a, b)| a * b).sum();
        let d4: f64 = w[4].iter().zip(&f).map(|(a, b)| a * b).sum();
        assert!((d2 - 2.0).abs() < 1e-8 && (d4 - 24.0).abs() < 1e-6);
    }
}
