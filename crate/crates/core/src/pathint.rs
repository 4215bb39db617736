//! Discretized path integrals for the standard symbol of a slice product,
//! and their stationary-phase (backward Euler) limit.
//!
//! With slice standard symbols `u_n`, `q_0 = q_N = q` and `p_0 = p`, the
//! standard symbol of `U_N ... U_1` is
//! `∫ prod_n u_n(q_n, p_{n-1}) exp((i/hbar) sum_n p_{n-1} (q_n - q_{n-1}))`
//! over the interior nodes with measure `dq dp / (2 pi hbar)` per node.
//!
//! Differentiating the discrete action
//! `S = sum_n [p_{n-1} (q_n - q_{n-1}) - A_n(q_n, p_{n-1})]`, with
//! `A_n = f(t_n, .) dt_n`, in the interior `q_n` and `p_n` gives
//!
//! ```text
//! p_n = p_{n-1} - dA_n/dq (q_n, p_{n-1})
//! q_n = q_{n-1} + dA_n/dp (q_n, p_{n-1})     (implicit in q_n)
//! ```
//!
//! which is the backward Euler scheme used by [`backward_euler_hamilton`].

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::numeric::flat_top;
use crate::slicer::{slice_kernel, Partition, SlicerError};
use crate::symcalc::{
    compose_standard, omega_transform_with, standard_symbol_of, OmegaMethod, OmegaRule, OperatorKernel, PhaseGrid,
    QuasiHamiltonian, SymbolField, SymcalcError, C64,
};
use crate::numeric::FftPair;

pub const MAX_SLICES: usize = 3;
pub const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathintError {
    #[error(transparent)]
    Symcalc(#[from] SymcalcError),
    #[error(transparent)]
    Slicer(#[from] SlicerError),
    #[error("direct quadrature supports at most {MAX_SLICES} slices, got {0}")]
    TooManySlices(usize),
    #[error("point (q = {q}, p = {p}) is not a node of the quadrature grid")]
    PointOffGrid { q: f64, p: f64 },
    #[error("quadrature did not converge: Richardson estimate {estimate:e} above tolerance {tol:e}")]
    QuadratureNonconvergence { estimate: f64, tol: f64 },
    #[error("Newton failed in implicit step {step} (residual {residual:e})")]
    NewtonFailure { step: usize, residual: f64 },
    #[error("stationary-path Newton diverged (gradient norm {gradient:e})")]
    Divergence { gradient: f64 },
    #[error("invalid path: {0}")]
    InvalidPath(String),
}

pub type Result<T> = std::result::Result<T, PathintError>;

/// Nodes `(q_n, p_n)`, `n = 0..=N`, with `q_0 = q_N` and `p_0 = p_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl DiscretePath {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if q.len() < 2 || q.len() != p.len() {
            return Err(PathintError::InvalidPath(format!("{} positions and {} momenta", q.len(), p.len())));
        }
        if q[0] != q[q.len() - 1] || p[0] != p[p.len() - 1] {
            return Err(PathintError::InvalidPath("boundary nodes must coincide".into()));
        }
        Ok(DiscretePath { q, p })
    }

    /// Path with the given interior nodes `n = 1..N-1`.
    pub fn with_interior(q: f64, p: f64, interior_q: &[f64], interior_p: &[f64]) -> Result<Self> {
        let mut qs = vec![q];
        qs.extend_from_slice(interior_q);
        qs.push(q);
        let mut ps = vec![p];
        ps.extend_from_slice(interior_p);
        ps.push(p);
        Self::new(qs, ps)
    }

    pub fn constant(q: f64, p: f64, slices: usize) -> Self {
        DiscretePath { q: vec![q; slices + 1], p: vec![p; slices + 1] }
    }

    pub fn slices(&self) -> usize {
        self.q.len() - 1
    }
}

/// `sum_{n=1}^N p_{n-1} (q_n - q_{n-1})`.
pub fn discrete_phase(path: &DiscretePath) -> f64 {
    (1..path.q.len()).map(|n| path.p[n - 1] * (path.q[n] - path.q[n - 1])).sum()
}

/// Smooth cutoff applied to slice symbols before the rule change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub q_center: f64,
    pub q_flat: f64,
    pub q_edge: f64,
    pub p_flat: f64,
    pub p_edge: f64,
}

impl Window {
    /// Flat out to `flat` and zero beyond `edge`, both as fractions of the
    /// grid's position and momentum extents. The edge is pulled in so the
    /// two outermost rows and columns vanish.
    pub fn for_grid(grid: &PhaseGrid, flat: f64, edge: f64) -> Window {
        let l = grid.extent();
        let lp = 2.0 * grid.p_max();
        let inner = (grid.n() / 2) as f64 - 2.0;
        Window {
            q_center: 0.5 * (grid.q_min() + grid.q_max()),
            q_flat: flat * l,
            q_edge: (edge * l).min(inner * grid.dq()),
            p_flat: flat * lp,
            p_edge: (edge * lp).min(inner * grid.dp()),
        }
    }

    pub fn standard(grid: &PhaseGrid) -> Window {
        Self::for_grid(grid, 0.25, 0.45)
    }

    /// A second window used to measure the cutoff's influence.
    pub fn alternate(grid: &PhaseGrid) -> Window {
        Self::for_grid(grid, 0.3, 0.48)
    }

    pub fn weight(&self, q: f64, p: f64) -> f64 {
        flat_top(q - self.q_center, self.q_flat, self.q_edge) * flat_top(p, self.p_flat, self.p_edge)
    }
}

/// Windowed Weyl symbol of the slice at `t_n`.
pub fn windowed_slice_symbol(
    f: &QuasiHamiltonian,
    t_n: f64,
    dt: f64,
    grid: &PhaseGrid,
    window: &Window,
) -> Result<SymbolField> {
    let s = crate::slicer::slice_symbol(f, t_n, dt, grid)?;
    Ok(s.map(|q, p, v| v * window.weight(q, p)))
}

/// Standard symbol of the windowed slice.
pub fn slice_standard_symbol(
    f: &QuasiHamiltonian,
    t_n: f64,
    dt: f64,
    grid: &PhaseGrid,
    window: &Window,
) -> Result<SymbolField> {
    let w = windowed_slice_symbol(f, t_n, dt, grid, window)?;
    Ok(omega_transform_with(&w, &OmegaRule::Standard, OmegaMethod::Fourier)?)
}

fn slice_standard_symbols(f: &QuasiHamiltonian, part: &Partition, grid: &PhaseGrid, window: &Window) -> Result<Vec<SymbolField>> {
    part.slices().map(|(t, dt)| slice_standard_symbol(f, t, dt, grid, window)).collect()
}

/// The `N`-fold sum at grid node `(j, kk)` for symbols `u_1, ..., u_N`:
/// weight `n^{-(N-1)}` and phase `exp(2 pi i sum_m k_{m-1} (j_m - j_{m-1}) / n)`,
/// summed one node pair at a time from the last slice inwards.
pub fn iterated_sum(symbols: &[SymbolField], j: usize, kk: usize) -> C64 {
    let nsl = symbols.len();
    let g = symbols[0].grid();
    let n = g.n();
    let half = (n / 2) as i64;
    let signed = |kk: usize| kk as i64 - half;
    let phase = |k: i64, d: i64| C64::from_polar(1.0, 2.0 * std::f64::consts::PI * (k * d).rem_euclid(n as i64) as f64 / n as f64);
    if nsl == 1 {
        return symbols[0].at(j, kk);
    }
    let plan = FftPair::new(n);
    // hat[s] = sum_k u(row, k) exp(2 pi i k s / n)
    let row_hat = |u: &SymbolField, row: usize| {
        let mut buf: Vec<C64> = vec![C64::new(0.0, 0.0); n];
        for k in 0..n {
            buf[(k + n / 2) % n] = u.at(row, k);
        }
        plan.inverse.process(&mut buf);
        buf
    };
    // F(j_{N-1}) after summing k_{N-1}: sum_k u_N(j, k) exp(2 pi i k (j - j_{N-1}) / n)
    let last = row_hat(&symbols[nsl - 1], j);
    let mut weight: Vec<C64> = (0..n).map(|jm| last[(j + n - jm) % n]).collect();
    for m in (1..nsl - 1).rev() {
        // fold node j_m of slice u_{m+1}: sum over k_m, then j_m
        let u = &symbols[m];
        let hats: Vec<Vec<C64>> = (0..n).into_par_iter().map(|jm| row_hat(u, jm)).collect();
        weight = (0..n)
            .map(|jprev| (0..n).map(|jm| weight[jm] * hats[jm][(jm + n - jprev) % n]).sum())
            .collect();
    }
    let k0 = signed(kk);
    let u1 = &symbols[0];
    let total: C64 = (0..n).map(|j1| weight[j1] * u1.at(j1, kk) * phase(k0, j1 as i64 - j as i64)).sum();
    total / (n as f64).powi(nsl as i32 - 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureSpec {
    pub grid: PhaseGrid,
    /// Defaults to [`Window::standard`] of `grid`.
    pub window: Option<Window>,
    /// Tolerance on the Richardson estimate, relative to `max(1, |value|)`.
    pub tol: f64,
    pub richardson: bool,
    pub compare_windows: bool,
}

impl QuadratureSpec {
    pub fn new(grid: PhaseGrid) -> Self {
        QuadratureSpec { grid, window: None, tol: 1e-4, richardson: true, compare_windows: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegralEstimate {
    pub value: C64,
    /// `|value(2n) - value(n)|` at fixed extent and window.
    pub richardson: Option<f64>,
    /// `|value(alternate window) - value|`.
    pub window_shift: Option<f64>,
}

fn integral_on(f: &QuasiHamiltonian, part: &Partition, grid: &PhaseGrid, window: &Window, q: f64, p: f64) -> Result<C64> {
    let (j, kk) = match (grid.q_index(q), grid.p_index(p)) {
        (Some(j), Some(k)) => (j, k),
        _ => return Err(PathintError::PointOffGrid { q, p }),
    };
    let symbols = slice_standard_symbols(f, part, grid, window)?;
    Ok(iterated_sum(&symbols, j, kk))
}

/// Standard symbol of `U_N ... U_1` at `(q, p)` by direct quadrature of the
/// multiple integral, `N <= 3`.
pub fn multiple_integral_symbol(
    f: &QuasiHamiltonian,
    part: &Partition,
    q: f64,
    p: f64,
    spec: &QuadratureSpec,
) -> Result<IntegralEstimate> {
    if part.len() > MAX_SLICES {
        return Err(PathintError::TooManySlices(part.len()));
    }
    if f.fiber() != 1 {
        return Err(PathintError::InvalidPath("direct quadrature supports scalar symbols".into()));
    }
    let window = spec.window.unwrap_or_else(|| Window::standard(&spec.grid));
    let value = integral_on(f, part, &spec.grid, &window, q, p)?;
    let richardson = if spec.richardson {
        let fine = integral_on(f, part, &spec.grid.refined(), &window, q, p)?;
        let est = (fine - value).norm();
        let tol = spec.tol * value.norm().max(1.0);
        if est > tol {
            return Err(PathintError::QuadratureNonconvergence { estimate: est, tol });
        }
        Some(est)
    } else {
        None
    };
    let window_shift = if spec.compare_windows {
        let alt = integral_on(f, part, &spec.grid, &Window::alternate(&spec.grid), q, p)?;
        Some((alt - value).norm())
    } else {
        None
    };
    Ok(IntegralEstimate { value, richardson, window_shift })
}

/// `u_N # ... # u_1` of the windowed slice standard symbols.
pub fn iterated_compose_symbol(f: &QuasiHamiltonian, part: &Partition, grid: &PhaseGrid, window: &Window) -> Result<SymbolField> {
    let symbols = slice_standard_symbols(f, part, grid, window)?;
    let mut acc = symbols[0].clone();
    for u in &symbols[1..] {
        acc = compose_standard(u, &acc)?;
    }
    Ok(acc)
}

/// Standard symbol of the product of unwindowed slice operators.
pub fn product_symbol_oracle(f: &QuasiHamiltonian, part: &Partition, grid: &PhaseGrid) -> Result<SymbolField> {
    let mut acc: Option<OperatorKernel> = None;
    for (t, dt) in part.slices() {
        let k = slice_kernel(f, t, dt, grid)?;
        acc = Some(match acc {
            None => k,
            Some(prev) => k.then_left(&prev),
        });
    }
    Ok(standard_symbol_of(&acc.expect("partition has at least one slice")))
}

/// Per-slice action term `A_n(q, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SliceAction {
    /// `A_n = f(t_n, q, p) dt_n`.
    #[default]
    Plain,
    /// `A_n = hbar atan(f dt_n / hbar)`, the phase of the slice symbol
    /// `[1 + (i/hbar) f dt_n]^{-1}` for real `f`.
    SlicePhase,
}

/// `A, A_q, A_p, A_qq, A_qp, A_pp` at one node.
struct ActionJet {
    f: [f64; 6],
}

fn action_jet(f: &QuasiHamiltonian, mode: SliceAction, t: f64, dt: f64, q: f64, p: f64) -> ActionJet {
    let v = |aq, ap| f.partial(aq, ap, t, q, p).re;
    let (f0, fq, fp, fqq, fqp, fpp) = (v(0, 0), v(1, 0), v(0, 1), v(2, 0), v(1, 1), v(0, 2));
    match mode {
        SliceAction::Plain => ActionJet { f: [f0 * dt, fq * dt, fp * dt, fqq * dt, fqp * dt, fpp * dt] },
        SliceAction::SlicePhase => {
            let hbar = f.hbar();
            let x = dt * f0 / hbar;
            let d1 = dt / (1.0 + x * x);
            let d2 = -2.0 * dt * dt * x / (hbar * (1.0 + x * x).powi(2));
            ActionJet {
                f: [
                    hbar * x.atan(),
                    d1 * fq,
                    d1 * fp,
                    d2 * fq * fq + d1 * fqq,
                    d2 * fq * fp + d1 * fqp,
                    d2 * fp * fp + d1 * fpp,
                ],
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalTrajectory {
    pub times: Vec<f64>,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    /// Residual of each implicit solve.
    pub residuals: Vec<f64>,
}

/// Backward Euler recursion from `(q_start, p_start)` over the partition.
pub fn backward_euler_hamilton(
    f: &QuasiHamiltonian,
    part: &Partition,
    q_start: f64,
    p_start: f64,
) -> Result<ClassicalTrajectory> {
    backward_euler_with(f, part, q_start, p_start, SliceAction::Plain)
}

pub fn backward_euler_with(
    f: &QuasiHamiltonian,
    part: &Partition,
    q_start: f64,
    p_start: f64,
    mode: SliceAction,
) -> Result<ClassicalTrajectory> {
    let mut traj = ClassicalTrajectory {
        times: part.times().to_vec(),
        q: vec![q_start],
        p: vec![p_start],
        residuals: vec![0.0],
    };
    for (step, (t, dt)) in part.slices().enumerate() {
        let (q0, p0) = (traj.q[step], traj.p[step]);
        let (qn, res) = implicit_position(f, mode, t, dt, q0, p0).ok_or(PathintError::NewtonFailure {
            step: step + 1,
            residual: f64::NAN,
        })?;
        if !(res <= NEWTON_TOL) {
            return Err(PathintError::NewtonFailure { step: step + 1, residual: res });
        }
        let jet = action_jet(f, mode, t, dt, qn, p0);
        traj.q.push(qn);
        traj.p.push(p0 - jet.f[1]);
        traj.residuals.push(res);
    }
    Ok(traj)
}

/// Solve `q - q0 - A_p(q, p0) = 0`; returns the root and final residual.
fn implicit_position(f: &QuasiHamiltonian, mode: SliceAction, t: f64, dt: f64, q0: f64, p0: f64) -> Option<(f64, f64)> {
    let mut q = q0 + action_jet(f, mode, t, dt, q0, p0).f[2];
    for _ in 0..NEWTON_MAX_ITER {
        let jet = action_jet(f, mode, t, dt, q, p0);
        let g = q - q0 - jet.f[2];
        if g.abs() <= NEWTON_TOL * 1e-2 * (1.0 + q.abs()) {
            return Some((q, g.abs()));
        }
        let dg = 1.0 - jet.f[4];
        if dg == 0.0 || !dg.is_finite() {
            return None;
        }
        q -= g / dg;
    }
    let res = (q - q0 - action_jet(f, mode, t, dt, q, p0).f[2]).abs();
    res.is_finite().then_some((q, res))
}

/// `S = sum_n [p_{n-1} (q_n - q_{n-1}) - A_n(q_n, p_{n-1})]`.
pub fn discrete_action(f: &QuasiHamiltonian, part: &Partition, path: &DiscretePath, mode: SliceAction) -> f64 {
    let a: f64 = part
        .slices()
        .enumerate()
        .map(|(i, (t, dt))| action_jet(f, mode, t, dt, path.q[i + 1], path.p[i]).f[0])
        .sum();
    discrete_phase(path) - a
}

/// Gradient in the interior nodes, ordered `(dS/dq_1, ..., dS/dq_{N-1},
/// dS/dp_1, ..., dS/dp_{N-1})`.
pub fn action_gradient(f: &QuasiHamiltonian, part: &Partition, path: &DiscretePath, mode: SliceAction) -> Vec<f64> {
    let (g, _) = gradient_hessian(f, part, path, mode, false);
    g.as_slice().to_vec()
}

fn gradient_hessian(
    f: &QuasiHamiltonian,
    part: &Partition,
    path: &DiscretePath,
    mode: SliceAction,
    hessian: bool,
) -> (DVector<f64>, DMatrix<f64>) {
    let nsl = part.len();
    let m = nsl - 1;
    let slices: Vec<(f64, f64)> = part.slices().collect();
    // jets[n] for slice n (1-based) at (q_n, p_{n-1})
    let jets: Vec<ActionJet> =
        (1..=nsl).map(|n| action_jet(f, mode, slices[n - 1].0, slices[n - 1].1, path.q[n], path.p[n - 1])).collect();
    let mut g = DVector::zeros(2 * m);
    let mut h = DMatrix::zeros(if hessian { 2 * m } else { 0 }, if hessian { 2 * m } else { 0 });
    for n in 1..=m {
        let (iq, ip) = (n - 1, m + n - 1);
        let jn = &jets[n - 1];
        let jn1 = &jets[n];
        g[iq] = path.p[n - 1] - path.p[n] - jn.f[1];
        g[ip] = path.q[n + 1] - path.q[n] - jn1.f[2];
        if hessian {
            h[(iq, iq)] = -jn.f[3];
            h[(iq, ip)] = -1.0;
            if n > 1 {
                h[(iq, m + n - 2)] = 1.0 - jn.f[4];
            }
            h[(ip, ip)] = -jn1.f[5];
            h[(ip, iq)] = -1.0;
            if n < m {
                h[(ip, n)] = 1.0 - jn1.f[4];
            }
        }
    }
    (g, h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryPath {
    pub path: DiscretePath,
    /// Max-norm of the action gradient at the solution.
    pub gradient: f64,
    pub iterations: usize,
}

/// Stationary point of the discrete action with `q_0 = q_N = q`, `p_0 = p`.
/// The initial guess shoots backward Euler on `q_1` to meet `q_N = q`.
pub fn stationary_path(f: &QuasiHamiltonian, part: &Partition, q: f64, p: f64, mode: SliceAction) -> Result<StationaryPath> {
    let nsl = part.len();
    if nsl == 1 {
        return Ok(StationaryPath { path: DiscretePath::constant(q, p, 1), gradient: 0.0, iterations: 0 });
    }
    let mut path = shooting_guess(f, part, q, p, mode).unwrap_or_else(|| DiscretePath::constant(q, p, nsl));
    let m = nsl - 1;
    let mut iterations = 0;
    loop {
        let (g, h) = gradient_hessian(f, part, &path, mode, true);
        let gn = g.amax();
        if gn <= NEWTON_TOL {
            return Ok(StationaryPath { path, gradient: gn, iterations });
        }
        if iterations >= NEWTON_MAX_ITER || !gn.is_finite() {
            return Err(PathintError::Divergence { gradient: gn });
        }
        let step = h.lu().solve(&(-g)).ok_or(PathintError::Divergence { gradient: gn })?;
        for n in 1..=m {
            path.q[n] += step[n - 1];
            path.p[n] += step[m + n - 1];
        }
        iterations += 1;
    }
}

fn shooting_guess(f: &QuasiHamiltonian, part: &Partition, q: f64, p: f64, mode: SliceAction) -> Option<DiscretePath> {
    let slices: Vec<(f64, f64)> = part.slices().collect();
    // march from a trial q_1 and report the miss at q_N
    let shoot = |q1: f64| -> Option<(f64, DiscretePath)> {
        let mut qs = vec![q, q1];
        let (t1, dt1) = slices[0];
        let mut ps = vec![p, p - action_jet(f, mode, t1, dt1, q1, p).f[1]];
        for (i, &(t, dt)) in slices.iter().enumerate().skip(1) {
            let (qn, _) = implicit_position(f, mode, t, dt, qs[i], ps[i])?;
            let pn = ps[i] - action_jet(f, mode, t, dt, qn, ps[i]).f[1];
            qs.push(qn);
            ps.push(pn);
        }
        let miss = qs[slices.len()] - q;
        *qs.last_mut()? = q;
        *ps.last_mut()? = p;
        Some((miss, DiscretePath { q: qs, p: ps }))
    };
    let (t1, dt1) = slices[0];
    let mut a = q + action_jet(f, mode, t1, dt1, q, p).f[2];
    let mut b = a + 1e-3 * (1.0 + a.abs());
    let (mut fa, mut best) = shoot(a)?;
    let (mut fb, pb) = shoot(b)?;
    if fb.abs() < fa.abs() {
        best = pb;
    }
    for _ in 0..NEWTON_MAX_ITER {
        if fb == fa {
            break;
        }
        let c = b - fb * (b - a) / (fb - fa);
        let (fc, pc) = shoot(c)?;
        a = b;
        fa = fb;
        b = c;
        fb = fc;
        best = pc;
        if fc.abs() <= 1e-13 * (1.0 + q.abs()) {
            break;
        }
    }
    Some(best)
}
