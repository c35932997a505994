//! Finite-difference and modal solvers for `y_t + y_xxx + y_x (+ y y_x) = 0`
//! on `(0, L)` with `y(0) = y(L) = 0` and `y_x(L) = u(t)`.
//!
//! Space: centered second-order stencils on `x_i = i·L/n`, a one-sided
//! third-derivative row next to `x = 0`, and a ghost point
//! `y_{n+1} = y_{n−1} + 2h·u` at `x = L`. Time: Crank–Nicolson, with the
//! nonlinear term treated by second-order Adams–Bashforth.

use crate::error::{KdvError, Result};
use crate::numerics::{linear_fit, loglog_slope, simpson, simpson_c};
use crate::spectrum_b::SpectrumB;
use num_complex::Complex64 as C64;
use serde::Serialize;
use std::collections::BTreeMap;

/// Real samples on `x_i = i·L/n`, `i = 0..=n`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridFunction {
    #[serde(rename = "L")]
    pub len: f64,
    pub n: usize,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(len: f64, n: usize) -> Self {
        GridFunction {
            len,
            n,
            values: vec![0.0; n + 1],
        }
    }

    pub fn from_fn(len: f64, n: usize, f: impl Fn(f64) -> f64) -> Self {
        let h = len / n as f64;
        GridFunction {
            len,
            n,
            values: (0..=n).map(|i| f(i as f64 * h)).collect(),
        }
    }

    pub fn step(&self) -> f64 {
        self.len / self.n as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * self.step()
    }

    /// `∫ y² dx` by Simpson's rule.
    pub fn energy(&self) -> f64 {
        let sq: Vec<f64> = self.values.iter().map(|v| v * v).collect();
        simpson(&sq, self.step())
    }

    pub fn norm(&self) -> f64 {
        self.energy().sqrt()
    }

    /// `∫ y(x) conj(f(x)) dx` by Simpson's rule.
    pub fn inner_with(&self, f: impl Fn(f64) -> C64) -> C64 {
        let h = self.step();
        let vals: Vec<C64> = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| v * f(i as f64 * h).conj())
            .collect();
        simpson_c(&vals, h)
    }

    /// Duality pairing `∫ y(x) conj(f(L − x)) dx`.
    pub fn dual_with(&self, f: impl Fn(f64) -> C64) -> C64 {
        let len = self.len;
        self.inner_with(|x| f(len - x))
    }

    /// `y_x(0)` from the second-order one-sided difference.
    pub fn dx_at_0(&self) -> f64 {
        let h = self.step();
        (-3.0 * self.values[0] + 4.0 * self.values[1] - self.values[2]) / (2.0 * h)
    }

    pub fn scaled(&self, s: f64) -> Self {
        GridFunction {
            len: self.len,
            n: self.n,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add_scaled(&self, other: &GridFunction, s: f64) -> Result<Self> {
        if other.n != self.n || (other.len - self.len).abs() > 1e-12 * self.len {
            return Err(KdvError::validation("grid functions live on different grids"));
        }
        Ok(GridFunction {
            len: self.len,
            n: self.n,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + s * b)
                .collect(),
        })
    }
}

/// LU factorization with partial pivoting of a band matrix.
#[derive(Clone, Debug)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
    piv: Vec<usize>,
}

impl BandedLu {
    /// Band storage for an `n×n` matrix with `kl` sub- and `ku` super-diagonals.
    pub fn new(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        BandedLu {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
            piv: Vec::new(),
        }
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.width + (j + self.kl - i)
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }

    /// Factorizes in place.
    pub fn factor(&mut self) -> Result<()> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        self.piv = vec![0; n];
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=last {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(KdvError::numerical(format!(
                    "singular banded matrix at pivot {k}: check grid size and time step"
                )));
            }
            self.piv[k] = p;
            let jend = (k + kl + ku).min(n - 1);
            if p != k {
                for j in k..=jend {
                    let (a, b) = (self.idx(k, j), self.idx(p, j));
                    self.data.swap(a, b);
                }
            }
            let pivot = self.get(k, k);
            for i in k + 1..=last {
                let l = self.get(i, k) / pivot;
                let a = self.idx(i, k);
                self.data[a] = l;
                if l != 0.0 {
                    for j in k + 1..=jend {
                        let akj = self.get(k, j);
                        let b = self.idx(i, j);
                        self.data[b] -= l * akj;
                    }
                }
            }
        }
        Ok(())
    }

    /// Solves `A x = b` in place after [`factor`](Self::factor).
    pub fn solve(&self, b: &mut [f64]) {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                b.swap(k, p);
            }
            let bk = b[k];
            for i in k + 1..=(k + kl).min(n - 1) {
                b[i] -= self.get(i, k) * bk;
            }
        }
        for k in (0..n).rev() {
            let mut s = b[k];
            for j in k + 1..=(k + kl + ku).min(n - 1) {
                s -= self.get(k, j) * b[j];
            }
            b[k] = s / self.get(k, k);
        }
    }
}

/// Sparse rows of the spatial operator `A = D₃ + D₁` acting on `y_1..y_{n−1}`.
/// The control enters row `n−1` as `u/h²`.
fn operator_rows(n: usize, h: f64) -> Vec<Vec<(usize, f64)>> {
    let c3 = 1.0 / (2.0 * h * h * h);
    let c1 = 1.0 / (2.0 * h);
    let mut rows = Vec::with_capacity(n - 1);
    for i in 1..n {
        let mut row: BTreeMap<usize, f64> = BTreeMap::new();
        let mut put = |j: isize, c: f64| {
            // Interior unknowns only; the ghost y_{n+1} folds onto y_{n−1}.
            let j = if j == n as isize + 1 { n as isize - 1 } else { j };
            if j >= 1 && j <= n as isize - 1 {
                *row.entry(j as usize).or_insert(0.0) += c;
            }
        };
        let ii = i as isize;
        if i == 1 {
            for (o, c) in [(0, -3.0), (1, 10.0), (2, -12.0), (3, 6.0), (4, -1.0)] {
                put(o, c * c3);
            }
        } else {
            for (o, c) in [(-2, -1.0), (-1, 2.0), (1, -2.0), (2, 1.0)] {
                put(ii + o, c * c3);
            }
        }
        put(ii + 1, c1);
        put(ii - 1, -c1);
        rows.push(row.into_iter().map(|(j, c)| (j - 1, c)).collect());
    }
    rows
}

/// Crank–Nicolson stepper for a fixed `(L, n, dt)`.
#[derive(Clone, Debug)]
pub struct CnStepper {
    pub len: f64,
    pub n: usize,
    pub dt: f64,
    rows: Vec<Vec<(usize, f64)>>,
    lu: BandedLu,
}

impl CnStepper {
    pub fn new(len: f64, n: usize, dt: f64) -> Result<Self> {
        if !(len > 0.0) || !len.is_finite() {
            return Err(KdvError::validation(format!("length must be positive, got {len}")));
        }
        if n < 16 {
            return Err(KdvError::validation(format!("grid size n = {n} is too small (need ≥ 16)")));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(KdvError::validation(format!("time step must be positive, got {dt}")));
        }
        let h = len / n as f64;
        let rows = operator_rows(n, h);
        let m = n - 1;
        let mut lu = BandedLu::new(m, 2, 3);
        for (r, row) in rows.iter().enumerate() {
            lu.add(r, r, 1.0);
            for &(c, v) in row {
                lu.add(r, c, 0.5 * dt * v);
            }
        }
        lu.factor()?;
        Ok(CnStepper {
            len,
            n,
            dt,
            rows,
            lu,
        })
    }

    fn h(&self) -> f64 {
        self.len / self.n as f64
    }

    /// `A y` on the interior unknowns (without the control term).
    fn apply(&self, y: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(c, v)| v * y[c + 1]).sum())
            .collect()
    }

    /// One step from `y` (full grid, endpoints zero) with boundary data
    /// `u_old`, `u_new` and an explicit forcing `f` on the interior.
    fn advance(&self, y: &mut [f64], u_old: f64, u_new: f64, forcing: Option<&[f64]>) {
        let m = self.n - 1;
        let ay = self.apply(y);
        let h = self.h();
        let mut rhs: Vec<f64> = (0..m).map(|r| y[r + 1] - 0.5 * self.dt * ay[r]).collect();
        rhs[m - 1] -= 0.5 * self.dt * (u_old + u_new) / (h * h);
        if let Some(f) = forcing {
            for r in 0..m {
                rhs[r] -= self.dt * f[r];
            }
        }
        self.lu.solve(&mut rhs);
        y[0] = 0.0;
        y[self.n] = 0.0;
        y[1..self.n].copy_from_slice(&rhs);
    }

    /// One linear step; `u = None` imposes `y_x(L) = 0`.
    pub fn step_linear(&self, state: &GridFunction, u: Option<(f64, f64)>) -> Result<GridFunction> {
        if state.n != self.n {
            return Err(KdvError::validation("state grid does not match the stepper"));
        }
        let mut y = state.values.clone();
        let (a, b) = u.unwrap_or((0.0, 0.0));
        self.advance(&mut y, a, b, None);
        Ok(GridFunction {
            len: state.len,
            n: state.n,
            values: y,
        })
    }
}

/// `y y_x` in the energy-neutral skew form `((y²)_x + y y_x)/3`.
fn nonlinear_term(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len() - 1;
    (1..n)
        .map(|i| {
            let d = y[i + 1] - y[i - 1];
            let d2 = y[i + 1] * y[i + 1] - y[i - 1] * y[i - 1];
            (d2 + y[i] * d) / (6.0 * h)
        })
        .collect()
}

/// Discretization parameters for a run.
#[derive(Clone, Debug, Serialize)]
pub struct SimConfig {
    pub n: usize,
    pub dt: f64,
    /// Keep every `save_every`-th state (the final state is always kept).
    pub save_every: usize,
}

impl SimConfig {
    pub fn new(n: usize, dt: f64) -> Self {
        SimConfig {
            n,
            dt,
            save_every: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Saved states as `(t, y(t))`.
    #[serde(skip)]
    pub states: Vec<(f64, GridFunction)>,
    pub boundary_trace_dx0: Vec<f64>,
    pub boundary_trace_dxl: Vec<f64>,
    pub energy: Vec<f64>,
    /// `|E(0) − E(T) − ∫(y_x(t,0)² − u(t)²) dt| / E(0)`.
    pub energy_identity_defect: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &GridFunction {
        &self.states.last().expect("trajectory keeps the final state").1
    }

    /// `∫₀^T |y_x(t,0)|² dt` by the trapezoid rule on the step grid.
    pub fn observation(&self) -> f64 {
        trapezoid_nonuniform(&self.times, &self.boundary_trace_dx0.iter().map(|v| v * v).collect::<Vec<_>>())
    }
}

fn trapezoid_nonuniform(t: &[f64], f: &[f64]) -> f64 {
    t.windows(2)
        .zip(f.windows(2))
        .map(|(tw, fw)| 0.5 * (tw[1] - tw[0]) * (fw[0] + fw[1]))
        .sum()
}

/// Number of steps covering `[0, T]` and the adjusted step `T/steps`.
pub fn step_count(t: f64, dt: f64) -> Result<(usize, f64)> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(KdvError::validation(format!("horizon must be positive, got {t}")));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(KdvError::validation(format!("time step must be positive, got {dt}")));
    }
    let steps = ((t / dt) - 1e-9).ceil().max(1.0) as usize;
    Ok((steps, t / steps as f64))
}

/// Linear run on `[0, T]`. `u(t)` is the right Neumann datum; `None` gives the
/// homogeneous system `y_x(L) = 0`.
pub fn simulate(
    y0: &GridFunction,
    u: Option<&dyn Fn(f64) -> f64>,
    t: f64,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    run(y0, u, t, cfg, false)
}

/// Runs the nonlinear equation with `y_x(L) = 0`.
pub fn simulate_nonlinear(y0: &GridFunction, t: f64, cfg: &SimConfig) -> Result<Trajectory> {
    run(y0, None, t, cfg, true)
}

fn run(
    y0: &GridFunction,
    u: Option<&dyn Fn(f64) -> f64>,
    t: f64,
    cfg: &SimConfig,
    nonlinear: bool,
) -> Result<Trajectory> {
    if y0.n != cfg.n {
        return Err(KdvError::validation(format!(
            "initial state has n = {}, config asks for n = {}",
            y0.n, cfg.n
        )));
    }
    if y0.values.iter().any(|v| !v.is_finite()) {
        return Err(KdvError::validation("initial state has non-finite samples"));
    }
    let (steps, dt) = step_count(t, cfg.dt)?;
    let stepper = CnStepper::new(y0.len, cfg.n, dt)?;
    let h = y0.step();
    let ufun = |s: f64| u.map_or(0.0, |f| f(s));
    let mut y = y0.values.clone();
    y[0] = 0.0;
    y[cfg.n] = 0.0;
    let start_norm = y0.norm();
    let mut gf = GridFunction {
        len: y0.len,
        n: cfg.n,
        values: y.clone(),
    };
    let mut times = Vec::with_capacity(steps + 1);
    let mut dx0 = Vec::with_capacity(steps + 1);
    let mut dxl = Vec::with_capacity(steps + 1);
    let mut energy = Vec::with_capacity(steps + 1);
    let mut states = vec![(0.0, gf.clone())];
    times.push(0.0);
    dx0.push(gf.dx_at_0());
    dxl.push(ufun(0.0));
    energy.push(gf.energy());
    let mut prev_nl: Option<Vec<f64>> = None;
    for k in 1..=steps {
        let (t0, t1) = ((k - 1) as f64 * dt, k as f64 * dt);
        let forcing = if nonlinear {
            let cur = nonlinear_term(&y, h);
            let f: Vec<f64> = match &prev_nl {
                Some(p) => cur.iter().zip(p).map(|(c, q)| 1.5 * c - 0.5 * q).collect(),
                None => cur.clone(),
            };
            prev_nl = Some(cur);
            Some(f)
        } else {
            None
        };
        stepper.advance(&mut y, ufun(t0), ufun(t1), forcing.as_deref());
        gf.values.copy_from_slice(&y);
        let e = gf.energy();
        if !e.is_finite() {
            return Err(KdvError::numerical(format!("non-finite state at t = {t1}")));
        }
        if nonlinear && start_norm > 0.0 && e.sqrt() > 2.0 * start_norm {
            return Err(KdvError::numerical(format!(
                "blow-up: ‖y‖ doubled by t = {t1:.6}"
            )));
        }
        times.push(t1);
        dx0.push(gf.dx_at_0());
        dxl.push(ufun(t1));
        energy.push(e);
        if k == steps || k % cfg.save_every == 0 {
            states.push((t1, gf.clone()));
        }
    }
    let flux: Vec<f64> = dx0.iter().zip(&dxl).map(|(a, b)| a * a - b * b).collect();
    let e0 = energy[0];
    let defect = if e0 > 0.0 {
        (e0 - energy[steps] - trapezoid_nonuniform(&times, &flux)).abs() / e0
    } else {
        0.0
    };
    Ok(Trajectory {
        times,
        states,
        boundary_trace_dx0: dx0,
        boundary_trace_dxl: dxl,
        energy,
        energy_identity_defect: defect,
    })
}

/// `‖y⁰‖² / (2∫₀^T |y_x(t,0)|² dt)` for the homogeneous run, or `+∞` when the
/// observation is below `1e−9·‖y⁰‖²`. That level sits above the
/// discretization error of a truly unobservable mode and far below any
/// datum with a nonzero boundary trace.
pub fn observability_ratio(y0: &GridFunction, t: f64, cfg: &SimConfig) -> Result<f64> {
    let traj = simulate(y0, None, t, cfg)?;
    let e0 = y0.energy();
    let obs = traj.observation();
    if !(obs > 1e-9 * e0) {
        return Ok(f64::INFINITY);
    }
    Ok(e0 / (2.0 * obs))
}

/// Coefficients `z_j` of a state in the ℬ eigenbasis.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralState {
    #[serde(rename = "L")]
    pub len: f64,
    pub coeffs: BTreeMap<i64, C64>,
    #[serde(rename = "K_trunc")]
    pub k_trunc: usize,
}

impl SpectralState {
    pub fn zeros(len: f64, k_trunc: usize) -> Self {
        let coeffs = (-(k_trunc as i64)..=k_trunc as i64)
            .filter(|&j| j != 0)
            .map(|j| (j, C64::new(0.0, 0.0)))
            .collect();
        SpectralState { len, coeffs, k_trunc }
    }

    pub fn get(&self, j: i64) -> C64 {
        self.coeffs.get(&j).copied().unwrap_or_default()
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `Σ z_j ℰ_j(x)` sampled on a grid (real part).
    pub fn to_grid(&self, spec: &SpectrumB, n: usize) -> Result<GridFunction> {
        let mut g = GridFunction::zeros(spec.len, n);
        for (&j, &c) in &self.coeffs {
            if c == C64::new(0.0, 0.0) {
                continue;
            }
            let m = spec
                .mode(j)
                .ok_or_else(|| KdvError::validation(format!("mode {j} is outside the spectrum")))?;
            for (i, v) in g.values.iter_mut().enumerate() {
                *v += (c * m.eval(i as f64 * spec.len / n as f64)).re;
            }
        }
        Ok(g)
    }
}

/// `(e^z − 1)/z` and `(e^z − 1 − z)/z²`, by series near zero.
fn phi12(z: C64) -> (C64, C64) {
    if z.norm() < 1e-3 {
        let (z2, z3) = (z * z, z * z * z);
        (
            1.0 + z / 2.0 + z2 / 6.0 + z3 / 24.0,
            0.5 + z / 6.0 + z2 / 24.0 + z3 / 120.0,
        )
    } else {
        let e1 = crate::expsum::cexpm1(z);
        (e1 / z, (e1 - z) / (z * z))
    }
}

/// Integrates `w' = iλ w + a·f(t)` over a uniform grid with `f` linear between
/// samples; exact for each mode regardless of `λ`.
pub fn etd_linear(w0: C64, lambda: f64, a: C64, f: &[f64], dt: f64) -> Vec<C64> {
    let z = C64::new(0.0, lambda * dt);
    let e = z.exp();
    let (p1, p2) = phi12(z);
    let mut out = Vec::with_capacity(f.len());
    let mut w = w0;
    out.push(w);
    for k in 0..f.len() - 1 {
        // ∫₀^Δ e^{iλ(Δ−s)} (f_k + (f_{k+1}−f_k)s/Δ) ds
        let int = dt * (f[k] * p1 + (f[k + 1] - f[k]) * (p2));
        w = e * w + a * int;
        out.push(w);
    }
    out
}

/// `z_j(T)` of the ℬ-system `z_j' = iλ_j z_j − iλ_j h_j v(t)`, with
/// `iλ_j h_j = −conj(ℰ'_j(L))`, driven by `v` sampled uniformly on `[0, T]`.
pub fn modal_duhamel(z0: &SpectralState, v: &[f64], t: f64, spec: &SpectrumB) -> Result<SpectralState> {
    if v.len() < 2 {
        return Err(KdvError::validation("control needs at least two samples"));
    }
    let dt = t / (v.len() - 1) as f64;
    let mut out = z0.clone();
    for (&j, c) in out.coeffs.iter_mut() {
        let m = spec
            .mode(j)
            .ok_or_else(|| KdvError::validation(format!("mode {j} is outside the spectrum")))?;
        let gain = m.de_at_l.conj();
        let path = etd_linear(*c, m.lambda, gain, v, dt);
        *c = *path.last().expect("non-empty path");
    }
    Ok(out)
}

/// Least-squares decay rate `−d log E/dt` over `t ∈ [t_lo, t_hi]`.
pub fn fit_decay_rate(times: &[f64], energy: &[f64], t_lo: f64, t_hi: f64) -> Result<f64> {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (&t, &e) in times.iter().zip(energy) {
        if t >= t_lo && t <= t_hi && e > 0.0 {
            xs.push(t);
            ys.push(e.ln());
        }
    }
    if xs.len() < 3 {
        return Err(KdvError::numerical("too few samples in the fit window"));
    }
    Ok(-linear_fit(&xs, &ys).0)
}

/// Parameters of [`decay_sweep`].
#[derive(Clone, Debug, Serialize)]
pub struct DecayConfig {
    pub n: usize,
    pub dt: f64,
    /// `L²` norm of the initial data of the decay runs.
    pub amplitude: f64,
    /// The M-direction run lasts `T_fit = m_horizon_factor / δ²`.
    pub m_horizon_factor: f64,
    /// Length of the H-direction run.
    pub h_horizon: f64,
    /// Horizon of the observability runs.
    pub obs_horizon: f64,
    /// Use the nonlinear equation for the decay runs.
    pub nonlinear: bool,
    /// M-direction runs needing more steps than this are skipped.
    pub max_steps: usize,
}

impl Default for DecayConfig {
    fn default() -> Self {
        DecayConfig {
            n: 256,
            dt: 0.02,
            amplitude: 0.01,
            m_horizon_factor: 5.0,
            h_horizon: 10.0,
            obs_horizon: 2.0,
            nonlinear: false,
            max_steps: 400_000,
        }
    }
}

/// Measurements at one offset `δ = L − L₀`.
#[derive(Clone, Debug, Serialize)]
pub struct OffsetDecay {
    pub delta: f64,
    #[serde(rename = "L")]
    pub len: f64,
    /// Real and imaginary part of the slowest `M_𝒜` eigenvalue.
    pub zeta: [f64; 2],
    /// `|ℱ'_ζ(0)|` of the unit-norm mode.
    pub df0: f64,
    /// Energy decay rate `−2 Re ζ` predicted by the eigenvalue.
    pub m_rate_eigen: f64,
    /// Fitted energy decay rate of the M-direction run, if it was run.
    pub m_rate_sim: Option<f64>,
    pub m_fit_window: Option<[f64; 2]>,
    pub h_rate_sim: f64,
    /// Observability ratios of the M datum and of the hyperbolic datum.
    #[serde(serialize_with = "finite_or_tag")]
    pub obs_m: f64,
    #[serde(serialize_with = "finite_or_tag")]
    pub obs_h: f64,
    /// `max |a' − ζa|` along the M-direction run, `a` the `M_𝒜` coefficient.
    pub reduced_defect: Option<f64>,
    /// `reduced_defect / max(δ² + ‖y‖²)`.
    pub reduced_constant: Option<f64>,
    pub energy_identity_defect: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OffsetFailure {
    pub delta: f64,
    pub error: String,
}

/// Decay rates and observability ratios across offsets, with fitted laws.
#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    #[serde(rename = "L0")]
    pub l0: f64,
    pub offsets: Vec<f64>,
    pub config: DecayConfig,
    pub entries: Vec<OffsetDecay>,
    pub failures: Vec<OffsetFailure>,
    /// Log-log slope of `−2 Re ζ` against `δ`.
    pub m_exponent_eigen: Option<f64>,
    /// Log-log slope of the fitted M-direction rates against `δ`.
    pub m_exponent_sim: Option<f64>,
    /// `max/min − 1` of the fitted M rates divided by `δ²`.
    pub m_rate_spread: Option<f64>,
    /// `(max − min)/min` of the H-direction rates.
    pub h_rate_variation: Option<f64>,
    /// Log-log slope of the M-datum observability ratio against `δ`.
    pub obs_exponent: Option<f64>,
    /// `(max − min)/min` of the hyperbolic-datum observability ratios.
    pub obs_h_variation: Option<f64>,
    pub warnings: Vec<String>,
}

/// Writes a non-finite value as the string `"inf"`, `"-inf"` or `"nan"`,
/// which JSON cannot hold as a number.
pub fn finite_or_tag<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn spread(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some((hi - lo) / lo)
}

fn slope_if(x: &[f64], y: &[f64]) -> Option<f64> {
    (x.len() >= 2 && y.iter().all(|v| v.is_finite() && *v != 0.0)).then(|| loglog_slope(x, y))
}

fn unit(g: GridFunction, amplitude: f64) -> Result<GridFunction> {
    let nrm = g.norm();
    if !(nrm > 0.0) {
        return Err(KdvError::numerical("datum vanishes on the grid"));
    }
    Ok(g.scaled(amplitude / nrm))
}

/// Initial data of the decay measurements at `L = L₀ + δ`.
#[derive(Clone, Debug)]
pub struct DecayData {
    pub basis: crate::spectrum_a::QuasiInvariantBasis,
    /// Position in `basis.basis_a` of the mode with the largest `Re ζ`.
    pub slow: usize,
    /// `Re ℱ` of the slowest mode, scaled to the amplitude.
    pub m_datum: GridFunction,
    /// A generic smooth profile with its `M_𝒜` component removed, scaled to the amplitude.
    pub h_datum: GridFunction,
    /// Real part of the first hyperbolic ℬ mode with index at least 5, unit norm.
    pub hyperbolic_datum: GridFunction,
}

/// Builds the M-direction, H-direction and hyperbolic data at `L₀ + δ`.
pub fn decay_data(l0: f64, delta: f64, n: usize, amplitude: f64) -> Result<DecayData> {
    use crate::control::project_h_a;
    use crate::spectrum_a::quasi_invariant_basis;
    let len = l0 + delta;
    let spec = crate::spectrum_b::full_spectrum(len, 8)?;
    let basis = quasi_invariant_basis(&spec, l0)?;
    let slow = basis
        .basis_a
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.zeta.re.partial_cmp(&b.1.zeta.re).expect("finite eigenvalues"))
        .map(|(k, _)| k)
        .ok_or_else(|| KdvError::numerical("empty M_𝒜 basis"))?;
    let f = &basis.basis_a[slow];
    let m_datum = unit(GridFunction::from_fn(len, n, |x| f.eval(x).re), amplitude)?;
    let generic = GridFunction::from_fn(len, n, |x| {
        let s = x * (len - x) / (len * len);
        s * s * (1.0 + (3.0 * x).sin())
    });
    let h_datum = unit(project_h_a(&generic, &basis)?, amplitude)?;
    let hyper = spec
        .modes
        .iter()
        .filter(|m| m.index >= 5 && m.regime == crate::spectrum_b::Regime::Hyperbolic)
        .min_by_key(|m| m.index)
        .ok_or_else(|| KdvError::numerical("no hyperbolic ℬ mode with index ≥ 5"))?;
    let hyperbolic_datum = unit(GridFunction::from_fn(len, n, |x| hyper.func.eval(x).re), 1.0)?;
    Ok(DecayData {
        basis,
        slow,
        m_datum,
        h_datum,
        hyperbolic_datum,
    })
}

fn decay_at(l0: f64, delta: f64, cfg: &DecayConfig, warnings: &mut Vec<String>) -> Result<OffsetDecay> {
    use crate::control::m_a_coefficients;
    let len = l0 + delta;
    let data = decay_data(l0, delta, cfg.n, cfg.amplitude)?;
    let (basis, slow) = (&data.basis, data.slow);
    let f = &basis.basis_a[slow];
    let fnorm = f.func.norm();
    let (ym, yh, yo) = (&data.m_datum, &data.h_datum, &data.hyperbolic_datum);
    let ymo = ym.scaled(1.0 / cfg.amplitude);

    let base = SimConfig::new(cfg.n, cfg.dt);
    let run_decay = |y: &GridFunction, t: f64, c: &SimConfig| {
        if cfg.nonlinear {
            simulate_nonlinear(y, t, c)
        } else {
            simulate(y, None, t, c)
        }
    };

    let trh = run_decay(yh, cfg.h_horizon, &base)?;
    let h_rate_sim = fit_decay_rate(&trh.times, &trh.energy, 0.2 * cfg.h_horizon, cfg.h_horizon)?;
    let mut defect = trh.energy_identity_defect;

    let t_fit = cfg.m_horizon_factor / (delta * delta);
    let (steps, _) = step_count(t_fit, cfg.dt)?;
    let (mut m_rate_sim, mut m_fit_window, mut reduced_defect, mut reduced_constant) = (None, None, None, None);
    if steps <= cfg.max_steps {
        let mut c = base.clone();
        c.save_every = (steps / 200).max(1);
        let tr = run_decay(ym, t_fit, &c)?;
        m_rate_sim = Some(fit_decay_rate(&tr.times, &tr.energy, 0.2 * t_fit, t_fit)?);
        m_fit_window = Some([0.2 * t_fit, t_fit]);
        defect = defect.max(tr.energy_identity_defect);
        let coef: Vec<(f64, C64, f64)> = tr
            .states
            .iter()
            .map(|(t, y)| Ok((*t, m_a_coefficients(y, basis)?[slow], y.energy())))
            .collect::<Result<_>>()?;
        let (mut worst, mut worst_c) = (0.0f64, 0.0f64);
        for w in coef.windows(3) {
            let (t0, a0, _) = w[0];
            let (_, a1, e1) = w[1];
            let (t2, a2, _) = w[2];
            let r = ((a2 - a0) / (t2 - t0) - f.zeta * a1).norm();
            worst = worst.max(r);
            worst_c = worst_c.max(r / (delta * delta + e1));
        }
        reduced_defect = Some(worst);
        reduced_constant = Some(worst_c);
    } else {
        warnings.push(format!(
            "δ = {delta}: M-direction run skipped ({steps} steps exceed max_steps = {})",
            cfg.max_steps
        ));
    }

    let obs_m = observability_ratio(&ymo, cfg.obs_horizon, &base)?;
    let obs_h = observability_ratio(yo, cfg.obs_horizon, &base)?;
    Ok(OffsetDecay {
        delta,
        len,
        zeta: [f.zeta.re, f.zeta.im],
        df0: f.df_at_0.norm() / fnorm,
        m_rate_eigen: -2.0 * f.zeta.re,
        m_rate_sim,
        m_fit_window,
        h_rate_sim,
        obs_m,
        obs_h,
        reduced_defect,
        reduced_constant,
        energy_identity_defect: defect,
    })
}

/// Runs the decay and observability measurements at `L = L₀ + δ` for every
/// offset. Offsets are processed in parallel; a failing offset is recorded
/// and the sweep continues.
pub fn decay_sweep(l0: f64, offsets: &[f64], cfg: &DecayConfig) -> Result<DecayReport> {
    use rayon::prelude::*;
    crate::critical_lengths::classify_length(l0, 1e-9)?
        .ok_or_else(|| KdvError::validation(format!("L0 = {l0} is not a critical length")))?;
    if offsets.is_empty() {
        return Err(KdvError::validation("the sweep needs at least one offset"));
    }
    for &d in offsets {
        if !d.is_finite() || d == 0.0 {
            return Err(KdvError::validation(format!("offsets must be finite and nonzero, got {d}")));
        }
    }
    if cfg.n < 16 || !(cfg.dt > 0.0) || !(cfg.amplitude > 0.0) {
        return Err(KdvError::validation("decay runs need n ≥ 16, dt > 0 and a positive amplitude"));
    }
    let results: Vec<(f64, Vec<String>, Result<OffsetDecay>)> = offsets
        .par_iter()
        .map(|&d| {
            let mut w = Vec::new();
            let r = decay_at(l0, d, cfg, &mut w);
            (d, w, r)
        })
        .collect();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    let mut warnings = Vec::new();
    for (d, w, r) in results {
        warnings.extend(w);
        match r {
            Ok(e) => entries.push(e),
            Err(e) => failures.push(OffsetFailure {
                delta: d,
                error: e.to_string(),
            }),
        }
    }
    let deltas: Vec<f64> = entries.iter().map(|e| e.delta.abs()).collect();
    let eig: Vec<f64> = entries.iter().map(|e| e.m_rate_eigen).collect();
    let sim: Vec<(f64, f64)> = entries
        .iter()
        .filter_map(|e| e.m_rate_sim.map(|r| (e.delta.abs(), r)))
        .collect();
    let sim_d: Vec<f64> = sim.iter().map(|p| p.0).collect();
    let sim_r: Vec<f64> = sim.iter().map(|p| p.1).collect();
    let normalized: Vec<f64> = sim.iter().map(|(d, r)| r / (d * d)).collect();
    let obs_finite: Vec<(f64, f64)> = entries
        .iter()
        .filter(|e| e.obs_m.is_finite())
        .map(|e| (e.delta.abs(), e.obs_m))
        .collect();
    Ok(DecayReport {
        l0,
        offsets: offsets.to_vec(),
        config: cfg.clone(),
        m_exponent_eigen: slope_if(&deltas, &eig),
        m_exponent_sim: slope_if(&sim_d, &sim_r),
        m_rate_spread: spread(&normalized).map(|s| s.abs()),
        h_rate_variation: spread(&entries.iter().map(|e| e.h_rate_sim).collect::<Vec<_>>()),
        obs_exponent: slope_if(
            &obs_finite.iter().map(|p| p.0).collect::<Vec<_>>(),
            &obs_finite.iter().map(|p| p.1).collect::<Vec<_>>(),
        ),
        obs_h_variation: spread(&entries.iter().map(|e| e.obs_h).collect::<Vec<_>>()),
        entries,
        failures,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn banded_lu_matches_dense_solve() {
        let n = 9;
        let mut lu = BandedLu::new(n, 2, 3);
        let mut dense = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(2)..=(i + 3).min(n - 1) {
                let v = ((i * 7 + j * 3) % 11) as f64 - 5.0 + if i == j { 0.5 } else { 0.0 };
                lu.add(i, j, v);
                dense[(i, j)] = v;
            }
        }
        lu.factor().unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut x = b.clone();
        lu.solve(&mut x);
        let r = &dense * nalgebra::DVector::from_vec(x) - nalgebra::DVector::from_vec(b);
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn zero_state_stays_zero() {
        let y0 = GridFunction::zeros(7.0, 64);
        let traj = simulate(&y0, None, 0.1, &SimConfig::new(64, 0.01)).unwrap();
        assert!(traj.final_state().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn etd_is_exact_for_linear_forcing() {
        // w' = iλw + t, w(0) = 0.
        let lam = 3.0;
        let dt = 0.1;
        let f: Vec<f64> = (0..=10).map(|k| k as f64 * dt).collect();
        let w = etd_linear(C64::new(0.0, 0.0), lam, C64::new(1.0, 0.0), &f, dt);
        let il = C64::new(0.0, lam);
        let t = 1.0;
        let exact = ((il * t).exp() - 1.0 - il * t) / (il * il);
        assert!((w[10] - exact).norm() < 1e-14);
    }
}
