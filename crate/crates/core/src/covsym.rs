//! Coordinate-free symbols of kernels on a one-dimensional Riemannian chart.
//!
//! A kernel acts as `(K psi)(q) = ∫ K(q, q') psi(q') sqrt(g(q')) dq'`. Its
//! s-symbol pairs momenta with geodesic displacements,
//! `a_s(q, p) = ∫ sqrt(g(q)) exp(-i p v / hbar) K(exp_q((1 - s) v), exp_q(-s v)) dv`,
//! so `s = 1` is the standard symbol and `s = 1/2` the Weyl symbol.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::expr::{Bound, Expr, ExprError};
use crate::geom::{ChartSpec, GeomError, ManifoldChart, NormalNeighborhood};
use crate::numeric::{cosine_taper, fd_weights, flat_top, lagrange_at, stencil_start};
use crate::slicer::Partition;
use crate::symcalc::{OmegaRule, OperatorKernel, QuasiHamiltonian, C64};

/// Highest order of the covariant change-of-rule series.
pub const KMAX: usize = 4;
/// Interpolation width across and along kernel diagonals.
const INTERP_WIDTH: usize = 8;
/// Arc-length table resolution.
const ARC_INTERVALS: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovsymError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("covariant symbols need a one-dimensional chart, got dimension {0}")]
    Dimension(usize),
    #[error("invalid chart grid: {0}")]
    InvalidGrid(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("series order {0} exceeds the supported maximum {KMAX}")]
    OrderTooHigh(usize),
    #[error("rule `{0}` is not supported here")]
    UnsupportedRule(String),
    #[error("point q = {q} lies outside the chart grid")]
    OutsideGrid { q: f64 },
    #[error("q = {q} is not a grid node (nearest {nearest})")]
    OffNode { q: f64, nearest: f64 },
    #[error("too many slices: {0} (at most 2)")]
    TooManySlices(usize),
    #[error("quasi-Hamiltonian must be scalar")]
    NotScalar,
}

pub type Result<T> = std::result::Result<T, CovsymError>;

const GL5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// A one-dimensional chart with its arc-length parametrization. Geodesics
/// run at constant arc-length speed, so `exp` and `log` are closed form in it.
#[derive(Debug, Clone)]
pub struct LineChart {
    chart: ManifoldChart,
    gamma: Expr,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
    arc: Vec<f64>,
}

impl LineChart {
    pub fn new(chart: ManifoldChart) -> Result<Self> {
        if chart.dim() != 1 {
            return Err(CovsymError::Dimension(chart.dim()));
        }
        let (lo, hi) = chart.domain()[0];
        let coord = chart.coords()[0].clone();
        let gamma = chart.christoffel_exprs()[0].substitute(&coord, &Expr::var("q"));
        let h = (hi - lo) / ARC_INTERVALS as f64;
        let knots: Vec<f64> = (0..=ARC_INTERVALS).map(|i| lo + i as f64 * h).collect();
        let mut line = LineChart { chart, gamma, lo, hi, knots, arc: vec![0.0] };
        let mut acc = 0.0;
        for i in 0..ARC_INTERVALS {
            acc += line.segment(line.knots[i], line.knots[i + 1]);
            line.arc.push(acc);
        }
        Ok(line)
    }

    pub fn from_spec(spec: &ChartSpec) -> Result<Self> {
        Self::new(ManifoldChart::new(spec)?)
    }

    pub fn euclidean(lo: f64, hi: f64) -> Result<Self> {
        Self::new(ManifoldChart::euclidean(vec![[lo, hi]])?)
    }

    pub fn chart(&self) -> &ManifoldChart {
        &self.chart
    }
    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
    /// Connection coefficient as an expression in `q`.
    pub fn gamma_expr(&self) -> &Expr {
        &self.gamma
    }

    pub fn sqrt_g(&self, q: f64) -> f64 {
        self.chart.sqrt_det(&[q])
    }

    pub fn gamma(&self, q: f64) -> f64 {
        self.chart.christoffel(&[q])[0]
    }

    fn segment(&self, a: f64, b: f64) -> f64 {
        let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
        GL5.iter().map(|(x, w)| w * self.sqrt_g(c + r * x)).sum::<f64>() * r
    }

    /// Arc length from the lower end of the domain.
    pub fn arc(&self, q: f64) -> f64 {
        let h = (self.hi - self.lo) / ARC_INTERVALS as f64;
        let i = (((q - self.lo) / h).floor().max(0.0) as usize).min(ARC_INTERVALS - 1);
        self.arc[i] + self.segment(self.knots[i], q)
    }

    /// Point at arc length `s`, if it lies in the domain.
    pub fn arc_inverse(&self, s: f64) -> Option<f64> {
        let total = *self.arc.last().unwrap();
        if !(-1e-12 * total..=total * (1.0 + 1e-12)).contains(&s) {
            return None;
        }
        let i = self.arc.partition_point(|a| *a <= s).clamp(1, ARC_INTERVALS) - 1;
        let frac = (s - self.arc[i]) / (self.arc[i + 1] - self.arc[i]);
        let mut q = self.knots[i] + frac * (self.knots[i + 1] - self.knots[i]);
        for _ in 0..6 {
            let step = (self.arc(q) - s) / self.sqrt_g(q);
            q -= step;
            if step.abs() <= 1e-15 * (1.0 + q.abs()) {
                break;
            }
        }
        Some(q.clamp(self.lo, self.hi))
    }

    pub fn exp(&self, q: f64, v: f64) -> Option<f64> {
        if v == 0.0 {
            return Some(q);
        }
        self.arc_inverse(self.arc(q) + self.sqrt_g(q) * v)
    }

    pub fn log(&self, q: f64, q2: f64) -> f64 {
        (self.arc(q2) - self.arc(q)) / self.sqrt_g(q)
    }

    pub fn distance(&self, q: f64, q2: f64) -> f64 {
        (self.arc(q2) - self.arc(q)).abs()
    }

    /// Covector at `from` carried to `to` by parallel transport.
    pub fn transport_covector(&self, p: f64, from: f64, to: f64) -> f64 {
        p * self.sqrt_g(to) / self.sqrt_g(from)
    }
}

/// Uniform nodes `q_j = lo + j dq`, `j < n`, with both ends included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartGrid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl ChartGrid {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 4 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(CovsymError::InvalidGrid(format!("[{lo}, {hi}] with {n} nodes")));
        }
        Ok(ChartGrid { lo, hi, n })
    }

    pub fn dq(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        self.lo + j as f64 * self.dq()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.node(j)).collect()
    }

    pub fn nearest(&self, q: f64) -> usize {
        (((q - self.lo) / self.dq()).round().max(0.0) as usize).min(self.n - 1)
    }

    /// Index of `q` when it is a node.
    pub fn node_index(&self, q: f64) -> Result<usize> {
        let j = self.nearest(q);
        if (self.node(j) - q).abs() > 1e-9 * self.dq() {
            return Err(CovsymError::OffNode { q, nearest: self.node(j) });
        }
        Ok(j)
    }

    /// Same interval with twice the resolution; old nodes stay nodes.
    pub fn refined(&self) -> ChartGrid {
        ChartGrid { n: 2 * self.n - 1, ..*self }
    }
}

/// A kernel sampled on chart nodes: `K[i][j] = K(q_i, q_j)`.
#[derive(Debug, Clone)]
pub struct ManifoldKernel {
    line: Arc<LineChart>,
    grid: ChartGrid,
    sqrt_g: Vec<f64>,
    k: DMatrix<C64>,
    diagonal: bool,
    window: Option<Vec<f64>>,
    hbar: f64,
}

impl ManifoldKernel {
    pub fn new(line: &Arc<LineChart>, grid: ChartGrid, k: DMatrix<C64>) -> Result<Self> {
        let (lo, hi) = line.domain();
        if grid.lo < lo - 1e-12 || grid.hi > hi + 1e-12 {
            return Err(CovsymError::InvalidGrid(format!("[{}, {}] leaves the chart domain [{lo}, {hi}]", grid.lo, grid.hi)));
        }
        if k.nrows() != grid.n || k.ncols() != grid.n {
            return Err(CovsymError::InvalidKernel(format!("{}x{} matrix on {} nodes", k.nrows(), k.ncols(), grid.n)));
        }
        let sqrt_g = grid.nodes().iter().map(|q| line.sqrt_g(*q)).collect();
        Ok(ManifoldKernel { line: line.clone(), grid, sqrt_g, k, diagonal: false, window: None, hbar: 1.0 })
    }

    pub fn from_fn(line: &Arc<LineChart>, grid: ChartGrid, f: impl Fn(f64, f64) -> C64) -> Result<Self> {
        let k = DMatrix::from_fn(grid.n, grid.n, |i, j| f(grid.node(i), grid.node(j)));
        Self::new(line, grid, k)
    }

    /// Kernel of an operator matrix `M` acting on node values.
    pub fn from_operator(line: &Arc<LineChart>, grid: ChartGrid, m: &DMatrix<C64>) -> Result<Self> {
        let mut kern = Self::new(line, grid, m.clone())?;
        let dq = grid.dq();
        for j in 0..grid.n {
            let s = 1.0 / (kern.sqrt_g[j] * dq);
            kern.k.column_mut(j).iter_mut().for_each(|v| *v *= s);
        }
        Ok(kern)
    }

    /// Multiplication by `h(q)`.
    pub fn multiplication(line: &Arc<LineChart>, grid: ChartGrid, h: impl Fn(f64) -> C64) -> Result<Self> {
        let mut kern = Self::new(line, grid, DMatrix::zeros(grid.n, grid.n))?;
        for i in 0..grid.n {
            kern.k[(i, i)] = h(grid.node(i)) / (kern.sqrt_g[i] * grid.dq());
        }
        kern.diagonal = true;
        Ok(kern)
    }

    pub fn identity(line: &Arc<LineChart>, grid: ChartGrid) -> Result<Self> {
        Self::multiplication(line, grid, |_| C64::new(1.0, 0.0))
    }

    /// A flat-grid scalar kernel viewed on the Euclidean line.
    pub fn from_flat(op: &OperatorKernel) -> Result<Self> {
        if op.fiber() != 1 || op.grid().dimension() != 1 {
            return Err(CovsymError::InvalidKernel("flat kernel must be scalar and one-dimensional".into()));
        }
        let g = op.grid();
        let grid = ChartGrid::new(g.q(0), g.q(g.n() - 1), g.n())?;
        let line = Arc::new(LineChart::euclidean(g.q_min(), g.q_max())?);
        Ok(Self::new(&line, grid, op.matrix().clone())?.with_hbar(g.hbar()))
    }

    pub fn with_hbar(mut self, hbar: f64) -> Self {
        self.hbar = hbar;
        self
    }
    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn line(&self) -> &Arc<LineChart> {
        &self.line
    }
    pub fn grid(&self) -> &ChartGrid {
        &self.grid
    }
    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.k
    }
    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    /// Matrix acting on node values, `M[i][j] = K[i][j] sqrt(g_j) dq`.
    pub fn operator(&self) -> DMatrix<C64> {
        let dq = self.grid.dq();
        let mut m = self.k.clone();
        for j in 0..self.grid.n {
            let s = self.sqrt_g[j] * dq;
            m.column_mut(j).iter_mut().for_each(|v| *v *= s);
        }
        m
    }

    pub fn apply(&self, psi: &[C64]) -> Vec<C64> {
        let v = nalgebra::DVector::from_column_slice(psi);
        (self.operator() * v).iter().copied().collect()
    }

    /// Kernel of `self` after `first`.
    pub fn then_left(&self, first: &ManifoldKernel) -> Result<ManifoldKernel> {
        if self.grid != first.grid {
            return Err(CovsymError::InvalidKernel("kernels live on different grids".into()));
        }
        let m = self.operator() * first.operator();
        let mut out = Self::from_operator(&self.line, self.grid, &m)?;
        out.diagonal = self.diagonal && first.diagonal;
        out.hbar = self.hbar;
        Ok(out)
    }

    /// Values `h_i = K_ii sqrt(g_i) dq` of a multiplication kernel.
    fn diagonal_values(&self) -> Vec<C64> {
        (0..self.grid.n).map(|i| self.k[(i, i)] * self.sqrt_g[i] * self.grid.dq()).collect()
    }

    /// `K(x, y)` off the nodes, interpolated along diagonals `j - i = const`
    /// and then across them. Zero outside the grid.
    pub fn value(&self, x: f64, y: f64) -> C64 {
        let n = self.grid.n;
        let dq = self.grid.dq();
        let u = (x - self.grid.lo) / dq;
        let w = (y - self.grid.lo) / dq;
        let top = (n - 1) as f64;
        let eps = 1e-9;
        if u < -eps || w < -eps || u > top + eps || w > top + eps {
            return C64::new(0.0, 0.0);
        }
        let sigma = w - u;
        let mid = 0.5 * (u + w);
        let span = 2 * n - 1;
        let width = INTERP_WIDTH.min(span);
        let s0 = stencil_start(sigma + top, width, span) as i64 - (n as i64 - 1);
        let sig_nodes: Vec<f64> = (0..width as i64).map(|k| (s0 + k) as f64).collect();
        let across = &fd_weights(sigma, &sig_nodes, 0)[0];
        let mut acc = C64::new(0.0, 0.0);
        for (sk, wk) in sig_nodes.iter().zip(across) {
            if *wk == 0.0 {
                continue;
            }
            let s = *sk as i64;
            let first = (-s).max(0);
            let len = n as i64 - s.abs();
            if len <= 0 {
                continue;
            }
            let t = mid - 0.5 * *sk - first as f64;
            if t < -0.5 || t > len as f64 - 0.5 {
                continue;
            }
            let lw = INTERP_WIDTH.min(len as usize);
            let t0 = stencil_start(t, lw, len as usize);
            let nodes: Vec<f64> = (t0..t0 + lw).map(|v| v as f64).collect();
            let along = &fd_weights(t, &nodes, 0)[0];
            let mut line_val = C64::new(0.0, 0.0);
            for (m, a) in along.iter().enumerate() {
                if *a != 0.0 {
                    let i = first + (t0 + m) as i64;
                    line_val += self.k[(i as usize, (i + s) as usize)] * *a;
                }
            }
            acc += line_val * *wk;
        }
        acc
    }
}

/// Covariant symbol on a table of base points and momenta, `q`-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariantSymbol {
    pub rule: OmegaRule,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub values: Vec<C64>,
}

impl CovariantSymbol {
    pub fn at(&self, i: usize, k: usize) -> C64 {
        self.values[i * self.p.len() + k]
    }

    pub fn max_diff(&self, other: &CovariantSymbol) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
}

fn s_of(rule: &OmegaRule) -> Result<f64> {
    match rule {
        OmegaRule::Weyl => Ok(0.5),
        OmegaRule::Standard => Ok(1.0),
        OmegaRule::SParam(s) => Ok(*s),
        other => Err(CovsymError::UnsupportedRule(other.name())),
    }
}

/// The s-symbol of `kernel` for the s-family rules (`Weyl`, `Standard`,
/// `SParam`). Multiplication kernels give `h(q)` for every rule.
pub fn covariant_symbol(kernel: &ManifoldKernel, rule: &OmegaRule, qs: &[f64], ps: &[f64]) -> Result<CovariantSymbol> {
    let s = s_of(rule)?;
    let line = &kernel.line;
    let g = kernel.grid;
    for q in qs {
        if !(*q >= g.lo - 1e-12 && *q <= g.hi + 1e-12) {
            return Err(CovsymError::OutsideGrid { q: *q });
        }
    }
    let hbar = kernel.hbar;
    let diag = kernel.diagonal.then(|| kernel.diagonal_values());
    let min_sg = kernel.sqrt_g.iter().copied().fold(f64::INFINITY, f64::min);
    let rows: Vec<Vec<C64>> = qs
        .par_iter()
        .map(|&q| {
            if let Some(h) = &diag {
                let v = lagrange_at(h, (q - g.lo) / g.dq(), INTERP_WIDTH);
                return vec![v; ps.len()];
            }
            let node = g.node_index(q).ok();
            if s == 1.0 {
                if let Some(j) = node {
                    return standard_row(kernel, j, ps);
                }
            }
            let sg = line.sqrt_g(q);
            let dv = min_sg * g.dq() / (sg * s.max(1.0 - s).max(1e-3));
            let (a_lo, a_hi) = (line.arc(g.lo), line.arc(g.hi));
            let a_q = line.arc(q);
            // both endpoints stay in [a_lo, a_hi]
            let mut v_lo = f64::NEG_INFINITY;
            let mut v_hi = f64::INFINITY;
            for c in [1.0 - s, -s] {
                if c.abs() > 1e-14 {
                    let (b1, b2) = ((a_lo - a_q) / (sg * c), (a_hi - a_q) / (sg * c));
                    v_lo = v_lo.max(b1.min(b2));
                    v_hi = v_hi.min(b1.max(b2));
                }
            }
            let m_lo = (v_lo / dv).ceil() as i64;
            let m_hi = (v_hi / dv).floor() as i64;
            let mut samples = Vec::with_capacity((m_hi - m_lo + 1).max(0) as usize);
            for m in m_lo..=m_hi {
                let v = m as f64 * dv;
                let x = line.arc_inverse(a_q + sg * (1.0 - s) * v);
                let y = line.arc_inverse(a_q - sg * s * v);
                if let (Some(x), Some(y)) = (x, y) {
                    samples.push((v, kernel.value(x, y)));
                }
            }
            ps.iter()
                .map(|&p| samples.iter().map(|(v, k)| k * C64::from_polar(1.0, -p * v / hbar)).sum::<C64>() * (sg * dv))
                .collect()
        })
        .collect();
    Ok(CovariantSymbol { rule: rule.clone(), q: qs.to_vec(), p: ps.to_vec(), values: rows.concat() })
}

/// Standard symbol at node `j` as an exact node sum:
/// `a(q_j, p) = sum_j' exp(i p log_{q_j}(q_j')) M[j][j']`.
fn standard_row(kernel: &ManifoldKernel, j: usize, ps: &[f64]) -> Vec<C64> {
    let g = kernel.grid;
    let line = &kernel.line;
    let qj = g.node(j);
    let dq = g.dq();
    let terms: Vec<(f64, C64)> = (0..g.n)
        .filter(|&l| kernel.k[(j, l)] != C64::new(0.0, 0.0))
        .map(|l| (line.log(qj, g.node(l)), kernel.k[(j, l)] * kernel.sqrt_g[l] * dq))
        .collect();
    ps.iter().map(|&p| terms.iter().map(|(lg, m)| m * C64::from_polar(1.0, p * lg / kernel.hbar)).sum()).collect()
}

/// Weyl symbol.
pub fn covariant_weyl_symbol(kernel: &ManifoldKernel, qs: &[f64], ps: &[f64]) -> Result<CovariantSymbol> {
    covariant_symbol(kernel, &OmegaRule::Weyl, qs, ps)
}

/// Standard symbol.
pub fn covariant_standard_symbol(kernel: &ManifoldKernel, qs: &[f64], ps: &[f64]) -> Result<CovariantSymbol> {
    covariant_symbol(kernel, &OmegaRule::Standard, qs, ps)
}

/// Outcome of cutting a kernel down to the normal neighborhood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowReport {
    /// Fraction of `sum |K|` in the taper band.
    pub tapered_fraction: f64,
    /// Fraction of `sum |K|` left beyond the neighborhood afterwards.
    pub off_mass: f64,
    pub reapplied: bool,
}

/// Tapers `K(q, q')` to zero as the distance approaches
/// `max(rho(q), rho(q'))`, starting at 90% of it.
pub fn window_proper(kernel: &ManifoldKernel, nbhd: &NormalNeighborhood) -> (ManifoldKernel, WindowReport) {
    let g = kernel.grid;
    let rho: Vec<f64> = g.nodes().iter().map(|q| nbhd.radius_near(&[*q])).collect();
    if kernel.window.as_ref() == Some(&rho) {
        let report = WindowReport { tapered_fraction: 0.0, off_mass: 0.0, reapplied: true };
        return (kernel.clone(), report);
    }
    let arcs: Vec<f64> = g.nodes().iter().map(|q| kernel.line.arc(*q)).collect();
    let mut out = kernel.clone();
    let (mut total, mut band) = (0.0, 0.0);
    for i in 0..g.n {
        for j in 0..g.n {
            let v = kernel.k[(i, j)].norm();
            total += v;
            let r = rho[i].max(rho[j]);
            let d = (arcs[i] - arcs[j]).abs();
            let w = cosine_taper(d, 0.9 * r, r);
            if w < 1.0 {
                band += v;
            }
            out.k[(i, j)] *= w;
        }
    }
    let off: f64 = (0..g.n)
        .flat_map(|i| (0..g.n).map(move |j| (i, j)))
        .filter(|&(i, j)| (arcs[i] - arcs[j]).abs() >= rho[i].max(rho[j]))
        .map(|(i, j)| out.k[(i, j)].norm())
        .sum();
    out.window = Some(rho);
    let scale = if total > 0.0 { 1.0 / total } else { 0.0 };
    (out, WindowReport { tapered_fraction: band * scale, off_mass: off * scale, reapplied: false })
}

fn cnum(z: C64) -> Expr {
    match (z.re == 0.0, z.im == 0.0) {
        (_, true) => Expr::num(z.re),
        (true, false) => Expr::Imag * Expr::num(z.im),
        _ => Expr::num(z.re) + Expr::Imag * Expr::num(z.im),
    }
}

/// Change-of-rule series in horizontal and vertical derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariantSeries {
    pub expr: Expr,
    /// First omitted order, when it does not vanish identically.
    pub tail: Option<Expr>,
    pub kmax: usize,
}

impl CovariantSeries {
    pub fn eval(&self, q: f64, p: f64) -> Result<C64> {
        Ok(self.expr.eval_with(&[("q", C64::new(q, 0.0)), ("p", C64::new(p, 0.0))])?)
    }

    pub fn tail_at(&self, q: f64, p: f64) -> Result<f64> {
        match &self.tail {
            None => Ok(0.0),
            Some(t) => Ok(t.eval_with(&[("q", C64::new(q, 0.0)), ("p", C64::new(p, 0.0))])?.norm()),
        }
    }
}

/// Rewrites the `from`-symbol `a(q, p)` as a `to`-symbol through order
/// `kmax` in `hbar`, with `q`-derivatives lifted horizontally by the
/// connection: `A_0 = a`, `A_{k+1} = (d_q + Gamma p d_p) A_k - k Gamma A_k`.
pub fn covariant_omega_transform(
    line: &LineChart,
    a: &Expr,
    from: &OmegaRule,
    to: &OmegaRule,
    hbar: f64,
    kmax: usize,
) -> Result<CovariantSeries> {
    if kmax > KMAX {
        return Err(CovsymError::OrderTooHigh(kmax));
    }
    let ratio = to.multiplier(hbar) / from.multiplier(hbar);
    let zero = C64::new(0.0, 0.0);
    let series = ratio.taylor2(("x", zero), ("y", zero), kmax + 1, &[])?;
    let gamma = line.gamma_expr().clone();
    let p = Expr::var("p");
    let mut horizontal = vec![a.clone()];
    for k in 0..=kmax {
        let prev = &horizontal[k];
        let mut next = prev.derivative("q") + gamma.clone() * p.clone() * prev.derivative("p");
        if k > 0 {
            next = next - Expr::num(k as f64) * gamma.clone() * prev.clone();
        }
        horizontal.push(next);
    }
    let order_terms = |k: usize| -> Expr {
        let mut acc = Expr::num(0.0);
        for alpha in 0..=k {
            let beta = k - alpha;
            let c = series.coeff(alpha, beta) * (-C64::i() * hbar).powu(k as u32);
            if c.norm() == 0.0 {
                continue;
            }
            let mut d = horizontal[alpha].clone();
            for _ in 0..beta {
                d = d.derivative("p");
            }
            if !d.is_zero() {
                acc = acc + cnum(c) * d;
            }
        }
        acc
    };
    let mut expr = Expr::num(0.0);
    for k in 0..=kmax {
        expr = expr + order_terms(k);
    }
    let tail = order_terms(kmax + 1);
    Ok(CovariantSeries { expr, tail: (!tail.is_zero()).then_some(tail), kmax })
}

fn axis_derivative(values: &[C64], nodes: &[f64], stride: usize, offset: usize, out: &mut [C64]) {
    let n = nodes.len();
    let w = 7.min(n);
    for j in 0..n {
        let start = stencil_start(j as f64, w, n);
        let wt = &fd_weights(nodes[j], &nodes[start..start + w], 1)[1];
        out[offset + j * stride] =
            wt.iter().enumerate().map(|(i, c)| values[offset + (start + i) * stride] * *c).sum();
    }
}

/// Grid version of [`covariant_omega_transform`] with finite-difference
/// derivatives on the symbol table.
pub fn covariant_omega_transform_table(
    line: &LineChart,
    sym: &CovariantSymbol,
    to: &OmegaRule,
    hbar: f64,
    kmax: usize,
) -> Result<CovariantSymbol> {
    if kmax > KMAX {
        return Err(CovsymError::OrderTooHigh(kmax));
    }
    let (nq, np) = (sym.q.len(), sym.p.len());
    if nq < 2 || np < 2 {
        return Err(CovsymError::InvalidGrid("symbol table needs at least two points per axis".into()));
    }
    let ratio = to.multiplier(hbar) / sym.rule.multiplier(hbar);
    let zero = C64::new(0.0, 0.0);
    let series = ratio.taylor2(("x", zero), ("y", zero), kmax, &[])?;
    let gam: Vec<f64> = sym.q.iter().map(|q| line.gamma(*q)).collect();
    let d_q = |a: &[C64]| {
        let mut out = vec![zero; a.len()];
        for k in 0..np {
            axis_derivative(a, &sym.q, np, k, &mut out);
        }
        out
    };
    let d_p = |a: &[C64]| {
        let mut out = vec![zero; a.len()];
        for i in 0..nq {
            axis_derivative(a, &sym.p, 1, i * np, &mut out);
        }
        out
    };
    let mut horizontal = vec![sym.values.clone()];
    for k in 0..kmax {
        let prev = &horizontal[k];
        let (dq, dp) = (d_q(prev), d_p(prev));
        let next = (0..nq * np)
            .map(|idx| {
                let (i, kk) = (idx / np, idx % np);
                dq[idx] + gam[i] * sym.p[kk] * dp[idx] - k as f64 * gam[i] * prev[idx]
            })
            .collect();
        horizontal.push(next);
    }
    let mut values = vec![zero; nq * np];
    for k in 0..=kmax {
        for alpha in 0..=k {
            let beta = k - alpha;
            let c = series.coeff(alpha, beta) * (-C64::i() * hbar).powu(k as u32);
            if c.norm() == 0.0 {
                continue;
            }
            let mut d = horizontal[alpha].clone();
            for _ in 0..beta {
                d = d_p(&d);
            }
            values.iter_mut().zip(&d).for_each(|(v, x)| *v += c * x);
        }
    }
    Ok(CovariantSymbol { rule: to.clone(), q: sym.q.clone(), p: sym.p.clone(), values })
}

/// How a covector is moved between base points of consecutive slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovectorRule {
    /// Parallel transport along the connecting geodesic.
    #[default]
    Transport,
    /// Same coordinate components.
    Identity,
}

/// Standard symbol used for each slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceSymbol {
    /// `1 / (1 + i dt f / hbar)` taken as the standard symbol.
    Principal,
    /// Weyl slice rewritten through the covariant series of this order.
    Corrected(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceIntegralOptions {
    pub grid: ChartGrid,
    /// Intermediate momenta run over `|p| < p_extent` under a flat-top window
    /// that is 1 below half of it. Past `p_extent / 2 > pi hbar / dq` the
    /// sum over nodes aliases.
    pub p_extent: f64,
    pub dp: f64,
    pub covector: CovectorRule,
    pub symbol: SliceSymbol,
}

fn slice_standard(line: &LineChart, f: &QuasiHamiltonian, t: f64, dt: f64, symbol: SliceSymbol) -> Result<Bound> {
    let hbar = f.hbar();
    let fe = f.entries()[0].substitute("t", &Expr::num(t));
    let u = Expr::num(1.0) / (Expr::num(1.0) + Expr::Imag * Expr::num(dt / hbar) * fe);
    let e = match symbol {
        SliceSymbol::Principal => u,
        SliceSymbol::Corrected(k) => {
            covariant_omega_transform(line, &u, &OmegaRule::Weyl, &OmegaRule::Standard, hbar, k)?.expr
        }
    };
    Ok(e.bind(&["q", "p"])?)
}

/// Value at `(q, p)` of the covariant slice integral for one or two slices:
/// intermediate points run over chart nodes and momenta over the fiber,
/// paired with the geodesic displacement to the next point.
pub fn covariant_slice_integral(
    line: &LineChart,
    f: &QuasiHamiltonian,
    part: &Partition,
    q: f64,
    p: f64,
    opts: &SliceIntegralOptions,
) -> Result<C64> {
    if f.fiber() != 1 {
        return Err(CovsymError::NotScalar);
    }
    if part.len() > 2 {
        return Err(CovsymError::TooManySlices(part.len()));
    }
    let grid = opts.grid;
    let j = grid.node_index(q)?;
    let q = grid.node(j);
    let slices: Vec<(f64, f64)> = part.slices().collect();
    let syms: Vec<Bound> = slices
        .iter()
        .map(|(t, dt)| slice_standard(line, f, *t, *dt, opts.symbol))
        .collect::<Result<_>>()?;
    if syms.len() == 1 {
        return Ok(syms[0].eval_real(&[q, p]));
    }
    let hbar = f.hbar();
    let m = (opts.p_extent / opts.dp).floor() as i64;
    let phat: Vec<f64> = (-m..=m).map(|k| k as f64 * opts.dp).collect();
    let win: Vec<f64> = phat.iter().map(|v| flat_top(*v, 0.5 * opts.p_extent, opts.p_extent)).collect();
    let sg_q = line.sqrt_g(q);
    let fixed_second: Option<Vec<C64>> = (opts.covector == CovectorRule::Transport)
        .then(|| phat.iter().zip(&win).map(|(v, w)| syms[1].eval_real(&[q, v * sg_q]) * *w).collect());
    let dq = grid.dq();
    let nodes = grid.nodes();
    let total: C64 = nodes
        .par_iter()
        .map(|&q1| {
            let sg1 = line.sqrt_g(q1);
            let p_first = match opts.covector {
                CovectorRule::Transport => line.transport_covector(p, q, q1),
                CovectorRule::Identity => p,
            };
            let u1 = syms[0].eval_real(&[q1, p_first]);
            let base = C64::from_polar(1.0, p * line.log(q, q1) / hbar) * u1;
            let c = sg1 * line.log(q1, q) / hbar;
            let step = C64::from_polar(1.0, c * opts.dp);
            let mut z = C64::from_polar(1.0, c * phat[0]);
            let mut acc = C64::new(0.0, 0.0);
            for (k, v) in phat.iter().enumerate() {
                let u2 = match &fixed_second {
                    Some(tab) => tab[k],
                    None => syms[1].eval_real(&[q, v * sg1]) * win[k],
                };
                acc += u2 * z;
                z *= step;
                if k % 256 == 255 {
                    z = C64::from_polar(1.0, c * phat[k + 1]);
                }
            }
            base * acc * sg1
        })
        .sum();
    Ok(total * dq * opts.dp / (2.0 * std::f64::consts::PI * hbar))
}

/// Kinetic operator `-(hbar^2 / 2)` Laplace-Beltrami on the nodes,
/// symmetric in the `sqrt(g) dq` inner product, with the wave function
/// vanishing past both ends.
pub fn laplace_beltrami(line: &LineChart, grid: ChartGrid, hbar: f64) -> DMatrix<f64> {
    let n = grid.n;
    let dq = grid.dq();
    let mut a = DMatrix::zeros(n, n);
    for m in 0..n - 1 {
        let qm = grid.node(m) + 0.5 * dq;
        let c = 0.5 * hbar * hbar / (line.sqrt_g(qm) * dq);
        a[(m, m)] += c;
        a[(m + 1, m + 1)] += c;
        a[(m, m + 1)] -= c;
        a[(m + 1, m)] -= c;
    }
    for i in 0..n {
        let s = 1.0 / (line.sqrt_g(grid.node(i)) * dq);
        a.row_mut(i).iter_mut().for_each(|v| *v *= s);
    }
    a
}

/// Kernel of the ordered product of resolvent slices
/// `(1 + i dt_n H / hbar)^{-1}` of the Laplace-Beltrami kinetic operator.
pub fn resolvent_product_oracle(line: &Arc<LineChart>, grid: ChartGrid, hbar: f64, part: &Partition) -> Result<ManifoldKernel> {
    let h = laplace_beltrami(line, grid, hbar).map(|v| C64::new(v, 0.0));
    let n = grid.n;
    let mut m = DMatrix::<C64>::identity(n, n);
    for (_, dt) in part.slices() {
        let a = DMatrix::<C64>::identity(n, n) + &h * C64::new(0.0, dt / hbar);
        let inv = a
            .lu()
            .try_inverse()
            .ok_or_else(|| CovsymError::InvalidKernel("singular resolvent slice".into()))?;
        m = inv * m;
    }
    Ok(ManifoldKernel::from_operator(line, grid, &m)?.with_hbar(hbar))
}

/// Kinetic quasi-Hamiltonian `g^{11}(q) p^2 / 2` of a line chart.
pub fn kinetic_hamiltonian(line: &LineChart, hbar: f64) -> Result<QuasiHamiltonian> {
    let coord = line.chart.coords()[0].clone();
    let g = line.chart.metric_exprs()[0].substitute(&coord, &Expr::var("q"));
    let e = Expr::var("p").powi(2) / (Expr::num(2.0) * g);
    QuasiHamiltonian::from_exprs(vec![e], 1, 2.0, hbar).map_err(|err| match err {
        crate::symcalc::SymcalcError::Expr(e) => CovsymError::Expr(e),
        other => CovsymError::InvalidKernel(other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Func;
    use crate::symcalc::{standard_symbol_of, weyl_dequantize, weyl_quantize_scalar_fn, PhaseGrid};

    fn exp_line() -> Arc<LineChart> {
        Arc::new(LineChart::from_spec(&ChartSpec::exponential_line(-3.0, 1.5)).unwrap())
    }

    #[test]
    fn arc_length_maps_match_geodesics() {
        let line = exp_line();
        for (q, q2) in [(0.0, 0.7), (-1.0, -2.5), (0.3, 1.2)] {
            let v = line.log(q, q2);
            assert!((v - ((q2 - q).exp() - 1.0)).abs() < 1e-12);
            assert!((line.exp(q, v).unwrap() - q2).abs() < 1e-12);
            let ode = line.chart().log_map(&[q], &[q2]).unwrap()[0];
            assert!((ode - v).abs() < 1e-7);
        }
        assert!(line.exp(0.0, 10.0).is_none());
    }

    #[test]
    fn interpolation_reproduces_nodes_and_smooth_kernels() {
        let line = exp_line();
        let grid = ChartGrid::new(-2.0, 1.0, 61).unwrap();
        let f = |x: f64, y: f64| C64::new((-(x - y).powi(2) * 3.0).exp() * (1.0 + 0.2 * x), 0.1 * y);
        let k = ManifoldKernel::from_fn(&line, grid, f).unwrap();
        assert!((k.value(grid.node(7), grid.node(9)) - k.matrix()[(7, 9)]).norm() < 1e-15);
        for (x, y) in [(0.013, -0.21), (-1.5, -1.37), (0.5, 0.77)] {
            assert!((k.value(x, y) - f(x, y)).norm() < 1e-6, "{x} {y}");
        }
        assert_eq!(k.value(1.5, 0.0), C64::new(0.0, 0.0));
    }

    #[test]
    fn identity_and_multiplication_symbols() {
        let line = exp_line();
        let grid = ChartGrid::new(-2.0, 1.0, 31).unwrap();
        let ps = [-3.0, 0.0, 2.0];
        let id = ManifoldKernel::identity(&line, grid).unwrap();
        for rule in [OmegaRule::Weyl, OmegaRule::Standard, OmegaRule::SParam(0.3)] {
            let s = covariant_symbol(&id, &rule, &[-1.0, 0.2, 0.45], &ps).unwrap();
            assert!(s.values.iter().all(|v| (v - 1.0).norm() < 1e-13));
        }
        let h = ManifoldKernel::multiplication(&line, grid, |q| C64::new(q.sin(), 0.0)).unwrap();
        let s = covariant_standard_symbol(&h, &[grid.node(4)], &ps).unwrap();
        assert!(s.values.iter().all(|v| (v - grid.node(4).sin()).norm() < 1e-13));
        let comp = h.then_left(&id).unwrap();
        assert!(comp.is_diagonal());
    }

    fn flat_gauss() -> OperatorKernel {
        let g = PhaseGrid::new(-8.0, 8.0, 64, 1.0).unwrap();
        weyl_quantize_scalar_fn(g, |q, p| {
            C64::new((-(q * q) / 2.0 - p * p / 3.0).exp(), 0.2 * (-(q - 0.5).powi(2) - p * p / 2.0).exp() * p)
        })
    }

    #[test]
    fn flat_chart_matches_grid_quantization() {
        let op = flat_gauss();
        let g = *op.grid();
        let k = ManifoldKernel::from_flat(&op).unwrap();
        let qs: Vec<f64> = (24..40).step_by(3).map(|j| g.q(j)).collect();
        let ps: Vec<f64> = (20..44).step_by(4).map(|kk| g.p(kk)).collect();
        let st = standard_symbol_of(&op);
        let wy = weyl_dequantize(&op);
        let cs = covariant_standard_symbol(&k, &qs, &ps).unwrap();
        let cw = covariant_weyl_symbol(&k, &qs, &ps).unwrap();
        for (i, q) in qs.iter().enumerate() {
            let j = g.q_index(*q).unwrap();
            for (m, p) in ps.iter().enumerate() {
                let kk = g.p_index(*p).unwrap();
                assert!((cs.at(i, m) - st.at(j, kk)).norm() < 1e-6);
                assert!((cw.at(i, m) - wy.at(j, kk)).norm() < 1e-6, "{q} {p}");
            }
        }
        let half = covariant_symbol(&k, &OmegaRule::SParam(0.5), &qs, &ps).unwrap();
        assert!(half.max_diff(&cw) < 1e-14);
    }

    #[test]
    fn position_momentum_series() {
        let qp = Expr::var("q") * Expr::var("p");
        let flat = LineChart::euclidean(-2.0, 2.0).unwrap();
        let s = covariant_omega_transform(&flat, &qp, &OmegaRule::Weyl, &OmegaRule::Standard, 1.0, 4).unwrap();
        assert!((s.eval(0.7, -1.3).unwrap() - C64::new(0.7 * -1.3, -0.5)).norm() < 1e-14);
        assert!(s.tail.is_none());
        let line = exp_line();
        let s = covariant_omega_transform(&line, &qp, &OmegaRule::Weyl, &OmegaRule::Standard, 0.5, 2).unwrap();
        for (q, p) in [(0.2, 1.0), (-1.0, 3.0)] {
            let gam = line.gamma(q);
            let expect = C64::new(q * p, -0.25 * (1.0 + gam * q));
            assert!((s.eval(q, p).unwrap() - expect).norm() < 1e-13);
        }
        assert!(matches!(
            covariant_omega_transform(&line, &qp, &OmegaRule::Weyl, &OmegaRule::Standard, 1.0, 5),
            Err(CovsymError::OrderTooHigh(5))
        ));
    }

    #[test]
    fn table_series_matches_symbolic() {
        let line = exp_line();
        let a = Expr::call(Func::Exp, -(Expr::var("p").powi(2)) / Expr::num(4.0)) * Expr::var("q").powi(2);
        let qs: Vec<f64> = (0..41).map(|i| -1.0 + i as f64 * 0.05).collect();
        let ps: Vec<f64> = (0..81).map(|k| -4.0 + k as f64 * 0.1).collect();
        let values = qs
            .iter()
            .flat_map(|q| ps.iter().map(move |p| (q, p)))
            .map(|(q, p)| a.eval_with(&[("q", C64::new(*q, 0.0)), ("p", C64::new(*p, 0.0))]).unwrap())
            .collect();
        let table = CovariantSymbol { rule: OmegaRule::Weyl, q: qs.clone(), p: ps.clone(), values };
        let num = covariant_omega_transform_table(&line, &table, &OmegaRule::Standard, 0.3, 2).unwrap();
        let sym = covariant_omega_transform(&line, &a, &OmegaRule::Weyl, &OmegaRule::Standard, 0.3, 2).unwrap();
        for i in (5..36).step_by(5) {
            for k in (10..70).step_by(7) {
                assert!((num.at(i, k) - sym.eval(qs[i], ps[k]).unwrap()).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn window_clears_far_mass_and_is_idempotent() {
        let line = exp_line();
        let grid = ChartGrid::new(-2.0, 1.0, 31).unwrap();
        let k = ManifoldKernel::from_fn(&line, grid, |x, y| C64::new((-(x - y).powi(2)).exp(), 0.0)).unwrap();
        let (w, rep) = window_proper(&k, &NormalNeighborhood::uniform(0.5));
        assert_eq!(rep.off_mass, 0.0);
        assert!(rep.tapered_fraction > 0.0 && !rep.reapplied);
        let (w2, rep2) = window_proper(&w, &NormalNeighborhood::uniform(0.5));
        assert!(rep2.reapplied);
        assert_eq!(w.matrix(), w2.matrix());
    }

    #[test]
    fn single_slice_and_limits() {
        let line = exp_line();
        let f = kinetic_hamiltonian(&line, 1.0).unwrap();
        let grid = ChartGrid::new(-3.0, 1.5, 91).unwrap();
        let opts = SliceIntegralOptions {
            grid,
            p_extent: 100.0,
            dp: 0.5,
            covector: CovectorRule::Transport,
            symbol: SliceSymbol::Principal,
        };
        let one = Partition::uniform(0.0, 0.1, 1).unwrap();
        let v = covariant_slice_integral(&line, &f, &one, 0.0, 2.0, &opts).unwrap();
        assert!((v - 1.0 / C64::new(1.0, 0.1 * 2.0)).norm() < 1e-14, "{v}");
        let three = Partition::uniform(0.0, 0.1, 3).unwrap();
        assert!(matches!(
            covariant_slice_integral(&line, &f, &three, 0.0, 2.0, &opts),
            Err(CovsymError::TooManySlices(3))
        ));
        assert!(matches!(
            covariant_slice_integral(&line, &f, &one, 0.01, 2.0, &opts),
            Err(CovsymError::OffNode { .. })
        ));
    }

    #[test]
    fn two_slices_track_operator_product() {
        let line = exp_line();
        let f = kinetic_hamiltonian(&line, 1.0).unwrap();
        let grid = ChartGrid::new(-3.0, 1.5, 721).unwrap();
        let part = Partition::uniform(0.0, 0.02, 2).unwrap();
        let opts = SliceIntegralOptions {
            grid,
            p_extent: 800.0,
            dp: 0.2,
            covector: CovectorRule::Transport,
            symbol: SliceSymbol::Principal,
        };
        let oracle = resolvent_product_oracle(&line, grid, 1.0, &part).unwrap();
        let q = grid.node(grid.nearest(0.0));
        let ps = [0.0, 5.0];
        let o = covariant_standard_symbol(&oracle, &[q], &ps).unwrap();
        for (m, p) in ps.iter().enumerate() {
            let c = covariant_slice_integral(&line, &f, &part, q, *p, &opts).unwrap();
            assert!((c - o.at(0, m)).norm() < 2e-3, "{p}: {c} vs {}", o.at(0, m));
        }
    }
}
