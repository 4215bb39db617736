//! Chart-based metric-affine geometry in one and two dimensions.
//!
//! A chart carries a metric `g_ij(q)` given by expressions and a connection
//! `Gamma^k_ij = LC^k_ij + C^k_ij` built from an optional torsion input.
//! Index convention: `nabla_i e_j = Gamma^k_ij e_k`, so a vector `w`
//! transported along a curve with velocity `u` obeys
//! `dw^k/dt = -Gamma^k_ij u^i w^j`.
//!
//! Geodesics are autoparallels of the full connection. Only the symmetric
//! part of `Gamma` enters the geodesic equation, so torsion changes parallel
//! transport but leaves geodesics alone when it is added as pure torsion
//! ([`TorsionMode::Pure`]). The metric-compatible contorsion form
//! ([`TorsionMode::Contorsion`]) does bend geodesics in general.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse_expression, Bound, Expr, ExprError};
use crate::numeric::{dopri45, OdeStop};

pub const ODE_TOL: f64 = 1e-10;
pub const ROUND_TRIP_TOL: f64 = 1e-8;
const MIN_EIGEN: f64 = 1e-10;
const COMPAT_TOL: f64 = 1e-8;
const LOG_MAX_ITER: usize = 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error("invalid chart: {0}")]
    InvalidChart(String),
    #[error("metric not positive definite at {at:?} (smallest eigenvalue {min_eigen:e})")]
    NotPositiveDefinite { at: Vec<f64>, min_eigen: f64 },
    #[error("connection not metric compatible at {at:?} (residual {residual:e})")]
    NotMetric { at: Vec<f64>, residual: f64 },
    #[error("geodesic left the chart domain at {at:?} (tau = {tau})")]
    LeftDomain { at: Vec<f64>, tau: f64 },
    #[error("integration failed near {at:?} (tau = {tau})")]
    StepFailure { at: Vec<f64>, tau: f64 },
    #[error("point outside normal neighborhood (log residual {residual:e})")]
    OutsideNormalNeighborhood { residual: f64 },
}

pub type Result<T> = std::result::Result<T, GeomError>;

/// How the torsion input enters the connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TorsionMode {
    /// `Gamma = LC + K(T)`, the metric-compatible connection with torsion `T`.
    #[default]
    Contorsion,
    /// `Gamma = LC + T/2`: same geodesics as Levi-Civita, torsion `T`.
    Pure,
}

/// Textual chart description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartSpec {
    /// Coordinate names; defaults to `q` in 1D and `q1`, `q2` in 2D.
    #[serde(default)]
    pub coords: Vec<String>,
    /// Upper triangle of `g`, row-major: `[g11]` or `[g11, g12, g22]`.
    pub metric: Vec<String>,
    /// 2D only: `[T^1_12, T^2_12]`.
    #[serde(default)]
    pub torsion: Vec<String>,
    #[serde(default)]
    pub torsion_mode: TorsionMode,
    /// Coordinate box, one `[lo, hi]` per dimension.
    pub domain: Vec<[f64; 2]>,
}

impl ChartSpec {
    pub fn euclidean(domain: Vec<[f64; 2]>) -> Self {
        let metric = if domain.len() == 1 { vec!["1".into()] } else { vec!["1".into(), "0".into(), "1".into()] };
        ChartSpec { coords: vec![], metric, torsion: vec![], torsion_mode: TorsionMode::default(), domain }
    }

    /// Unit sphere in colatitude/longitude `(theta, phi)`.
    pub fn sphere_colatitude(margin: f64) -> Self {
        let pi = std::f64::consts::PI;
        ChartSpec {
            coords: vec!["theta".into(), "phi".into()],
            metric: vec!["1".into(), "0".into(), "sin(theta)^2".into()],
            torsion: vec![],
            torsion_mode: TorsionMode::default(),
            domain: vec![[margin, pi - margin], [-pi, pi]],
        }
    }

    /// Unit sphere in stereographic coordinates from the south pole; the
    /// north pole is the origin and the equator the unit circle.
    pub fn sphere_stereographic(half_width: f64) -> Self {
        let c = "4/(1+x^2+y^2)^2".to_string();
        ChartSpec {
            coords: vec!["x".into(), "y".into()],
            metric: vec![c.clone(), "0".into(), c],
            torsion: vec![],
            torsion_mode: TorsionMode::default(),
            domain: vec![[-half_width, half_width]; 2],
        }
    }

    /// `g = exp(2 q)` on `[lo, hi]`.
    pub fn exponential_line(lo: f64, hi: f64) -> Self {
        ChartSpec {
            coords: vec!["q".into()],
            metric: vec!["exp(2*q)".into()],
            torsion: vec![],
            torsion_mode: TorsionMode::default(),
            domain: vec![[lo, hi]],
        }
    }
}

/// Symbolic Levi-Civita symbols `Gamma^k_ij`, flattened as `[k][i][j]`.
pub fn levi_civita(metric: &[Expr], coords: &[&str]) -> Result<Vec<Expr>> {
    let d = coords.len();
    if metric.len() != d * d {
        return Err(GeomError::InvalidChart(format!("{} metric entries for dimension {d}", metric.len())));
    }
    let inv = symbolic_inverse(metric, d);
    let dg = |k: usize, i: usize, j: usize| metric[i * d + j].derivative(coords[k]);
    let mut out = Vec::with_capacity(d * d * d);
    for k in 0..d {
        for i in 0..d {
            for j in 0..d {
                let mut acc = Expr::num(0.0);
                for l in 0..d {
                    let bracket = dg(i, l, j) + dg(j, i, l) - dg(l, i, j);
                    acc = acc + inv[k * d + l].clone() * bracket;
                }
                out.push(Expr::num(0.5) * acc);
            }
        }
    }
    Ok(out)
}

fn symbolic_inverse(m: &[Expr], d: usize) -> Vec<Expr> {
    if d == 1 {
        return vec![Expr::num(1.0) / m[0].clone()];
    }
    let det = m[0].clone() * m[3].clone() - m[1].clone() * m[2].clone();
    vec![
        m[3].clone() / det.clone(),
        -(m[1].clone() / det.clone()),
        -(m[2].clone() / det.clone()),
        m[0].clone() / det,
    ]
}

/// A coordinate chart with metric and connection.
#[derive(Debug, Clone)]
pub struct ManifoldChart {
    spec: ChartSpec,
    dim: usize,
    coords: Vec<String>,
    domain: Vec<(f64, f64)>,
    metric_exprs: Vec<Expr>,
    gamma_exprs: Vec<Expr>,
    metric: Vec<Bound>,
    dmetric: Vec<Bound>,
    gamma: Vec<Bound>,
    dgamma: Vec<Bound>,
    torsion: Vec<Bound>,
    has_torsion: bool,
}

impl ManifoldChart {
    pub fn new(spec: &ChartSpec) -> Result<Self> {
        let d = spec.domain.len();
        if !(1..=2).contains(&d) {
            return Err(GeomError::InvalidChart(format!("dimension {d} unsupported (1 or 2)")));
        }
        for (i, [lo, hi]) in spec.domain.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(GeomError::InvalidChart(format!("domain[{i}] = [{lo}, {hi}] is empty")));
            }
        }
        let coords: Vec<String> = if spec.coords.is_empty() {
            if d == 1 {
                vec!["q".into()]
            } else {
                vec!["q1".into(), "q2".into()]
            }
        } else {
            spec.coords.clone()
        };
        if coords.len() != d || (d == 2 && coords[0] == coords[1]) {
            return Err(GeomError::InvalidChart(format!("need {d} distinct coordinate names")));
        }
        let names: Vec<&str> = coords.iter().map(String::as_str).collect();
        let tri = d * (d + 1) / 2;
        if spec.metric.len() != tri {
            return Err(GeomError::InvalidChart(format!("metric needs {tri} entries, got {}", spec.metric.len())));
        }
        let parsed = spec.metric.iter().map(|s| parse_expression(s)).collect::<std::result::Result<Vec<_>, _>>()?;
        let metric_exprs = if d == 1 {
            parsed
        } else {
            vec![parsed[0].clone(), parsed[1].clone(), parsed[1].clone(), parsed[2].clone()]
        };
        let torsion_exprs = match (d, spec.torsion.len()) {
            (_, 0) => vec![Expr::num(0.0); d * d * d],
            (2, 2) => {
                let t: Vec<Expr> = spec.torsion.iter().map(|s| parse_expression(s)).collect::<std::result::Result<_, _>>()?;
                // [k][i][j] with T^k_12 = -T^k_21
                let z = Expr::num(0.0);
                vec![z.clone(), t[0].clone(), -t[0].clone(), z.clone(), z.clone(), t[1].clone(), -t[1].clone(), z]
            }
            (d, m) => {
                return Err(GeomError::InvalidChart(format!("torsion needs 0 entries in 1D or 2 in 2D; got {m} in {d}D")))
            }
        };
        let has_torsion = torsion_exprs.iter().any(|e| !e.is_zero());
        let lc = levi_civita(&metric_exprs, &names)?;
        let extra: Vec<Expr> = if !has_torsion {
            vec![Expr::num(0.0); d * d * d]
        } else {
            match spec.torsion_mode {
                TorsionMode::Pure => torsion_exprs.iter().map(|t| Expr::num(0.5) * t.clone()).collect(),
                TorsionMode::Contorsion => contorsion(&metric_exprs, &torsion_exprs, d),
            }
        };
        let gamma_exprs: Vec<Expr> = lc.into_iter().zip(extra).map(|(a, b)| a + b).collect();
        let bind = |e: &Expr| e.bind(&names);
        let metric = metric_exprs.iter().map(bind).collect::<std::result::Result<Vec<_>, _>>()?;
        let mut dmetric = Vec::with_capacity(d * d * d);
        for c in &names {
            for e in &metric_exprs {
                dmetric.push(bind(&e.derivative(c))?);
            }
        }
        let gamma = gamma_exprs.iter().map(bind).collect::<std::result::Result<Vec<_>, _>>()?;
        let mut dgamma = Vec::with_capacity(d.pow(4));
        for c in &names {
            for e in &gamma_exprs {
                dgamma.push(bind(&e.derivative(c))?);
            }
        }
        let torsion = torsion_exprs.iter().map(bind).collect::<std::result::Result<Vec<_>, _>>()?;
        let chart = ManifoldChart {
            spec: spec.clone(),
            dim: d,
            coords,
            domain: spec.domain.iter().map(|[a, b]| (*a, *b)).collect(),
            metric_exprs,
            gamma_exprs,
            metric,
            dmetric,
            gamma,
            dgamma,
            torsion,
            has_torsion,
        };
        chart.validate()?;
        Ok(chart)
    }

    pub fn euclidean(domain: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(&ChartSpec::euclidean(domain))
    }

    fn validate(&self) -> Result<()> {
        let check_metric = self.is_metric_compatible();
        for q in self.lattice(5, 0.0) {
            let g = self.metric(&q);
            let ev = min_eigen(&g, self.dim);
            if !(ev > MIN_EIGEN) {
                return Err(GeomError::NotPositiveDefinite { at: q, min_eigen: ev });
            }
            if check_metric {
                let residual = self.metric_compatibility_residual(&q);
                if !(residual <= COMPAT_TOL) {
                    return Err(GeomError::NotMetric { at: q, residual });
                }
            }
        }
        Ok(())
    }

    /// Regular sample lattice, `per_axis` points per axis, inset by
    /// `margin` times the box width.
    pub fn lattice(&self, per_axis: usize, margin: f64) -> Vec<Vec<f64>> {
        let axis = |i: usize| -> Vec<f64> {
            let (lo, hi) = self.domain[i];
            let w = hi - lo;
            let (a, b) = (lo + margin * w, hi - margin * w);
            if per_axis == 1 {
                return vec![0.5 * (a + b)];
            }
            (0..per_axis).map(|k| a + (b - a) * k as f64 / (per_axis - 1) as f64).collect()
        };
        let xs = axis(0);
        if self.dim == 1 {
            return xs.into_iter().map(|x| vec![x]).collect();
        }
        let ys = axis(1);
        xs.iter().flat_map(|&x| ys.iter().map(move |&y| vec![x, y])).collect()
    }

    pub fn spec(&self) -> &ChartSpec {
        &self.spec
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn coords(&self) -> &[String] {
        &self.coords
    }
    pub fn domain(&self) -> &[(f64, f64)] {
        &self.domain
    }
    pub fn has_torsion(&self) -> bool {
        self.has_torsion
    }
    pub fn torsion_mode(&self) -> TorsionMode {
        self.spec.torsion_mode
    }
    /// False only for pure torsion, which breaks metric compatibility.
    pub fn is_metric_compatible(&self) -> bool {
        !(self.has_torsion && self.spec.torsion_mode == TorsionMode::Pure)
    }
    pub fn metric_exprs(&self) -> &[Expr] {
        &self.metric_exprs
    }
    /// Connection symbols `[k][i][j]` as expressions in the coordinates.
    pub fn christoffel_exprs(&self) -> &[Expr] {
        &self.gamma_exprs
    }

    pub fn contains(&self, q: &[f64]) -> bool {
        q.iter().zip(&self.domain).all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    fn eval(b: &[Bound], q: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(b) {
            *o = e.eval_real(q).re;
        }
    }

    /// `g_ij`, row-major.
    pub fn metric(&self, q: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim * self.dim];
        Self::eval(&self.metric, q, &mut g);
        g
    }

    pub fn inverse_metric(&self, q: &[f64]) -> Vec<f64> {
        invert_small(&self.metric(q), self.dim)
    }

    pub fn sqrt_det(&self, q: &[f64]) -> f64 {
        det_small(&self.metric(q), self.dim).sqrt()
    }

    pub fn christoffel(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim.pow(3)];
        Self::eval(&self.gamma, q, &mut out);
        out
    }

    /// `d_m Gamma^k_ij` as `[m][k][i][j]`.
    pub fn christoffel_derivs(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim.pow(4)];
        Self::eval(&self.dgamma, q, &mut out);
        out
    }

    /// `T^k_ij = Gamma^k_ij - Gamma^k_ji`, evaluated from the connection.
    pub fn torsion(&self, q: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let gm = self.christoffel(q);
        let mut t = vec![0.0; d * d * d];
        for k in 0..d {
            for i in 0..d {
                for j in 0..d {
                    t[(k * d + i) * d + j] = gm[(k * d + i) * d + j] - gm[(k * d + j) * d + i];
                }
            }
        }
        t
    }

    /// Torsion from the chart input, independent of the connection.
    pub fn torsion_input(&self, q: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; self.dim.pow(3)];
        Self::eval(&self.torsion, q, &mut t);
        t
    }

    /// Max over `k, i, j` of `|nabla_k g_ij|`.
    pub fn metric_compatibility_residual(&self, q: &[f64]) -> f64 {
        let d = self.dim;
        let g = self.metric(q);
        let gm = self.christoffel(q);
        let mut dg = vec![0.0; d * d * d];
        Self::eval(&self.dmetric, q, &mut dg);
        let mut worst: f64 = 0.0;
        for k in 0..d {
            for i in 0..d {
                for j in 0..d {
                    let mut r = dg[(k * d + i) * d + j];
                    for l in 0..d {
                        r -= gm[(l * d + k) * d + i] * g[l * d + j] + gm[(l * d + k) * d + j] * g[i * d + l];
                    }
                    worst = worst.max(r.abs());
                }
            }
        }
        worst
    }

    /// `R^k_lij`, flattened `[k][l][i][j]`.
    pub fn curvature(&self, q: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let gm = self.christoffel(q);
        let dgm = self.christoffel_derivs(q);
        let g = |k: usize, i: usize, j: usize| gm[(k * d + i) * d + j];
        let dg = |m: usize, k: usize, i: usize, j: usize| dgm[((m * d + k) * d + i) * d + j];
        let mut r = vec![0.0; d.pow(4)];
        for k in 0..d {
            for l in 0..d {
                for i in 0..d {
                    for j in 0..d {
                        let mut v = dg(i, k, j, l) - dg(j, k, i, l);
                        for m in 0..d {
                            v += g(k, i, m) * g(m, j, l) - g(k, j, m) * g(m, i, l);
                        }
                        r[((k * d + l) * d + i) * d + j] = v;
                    }
                }
            }
        }
        r
    }

    /// `(R^k_lij, T^k_ij)` at `q`.
    pub fn curvature_torsion(&self, q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (self.curvature(q), self.torsion(q))
    }

    pub fn scalar_curvature(&self, q: &[f64]) -> f64 {
        let d = self.dim;
        let r = self.curvature(q);
        let gi = self.inverse_metric(q);
        let mut s = 0.0;
        for l in 0..d {
            for j in 0..d {
                let ric: f64 = (0..d).map(|k| r[((k * d + l) * d + k) * d + j]).sum();
                s += gi[l * d + j] * ric;
            }
        }
        s
    }

    /// Sectional curvature of the coordinate plane (2D charts).
    pub fn sectional_curvature(&self, q: &[f64]) -> Option<f64> {
        if self.dim != 2 {
            return None;
        }
        let r = self.curvature(q);
        let g = self.metric(q);
        // <R(e1, e2) e2, e1> / |e1 ^ e2|^2
        let r_1212: f64 = (0..2).map(|m| g[m] * r[((m * 2 + 1) * 2) * 2 + 1]).sum();
        Some(r_1212 / det_small(&g, 2))
    }

    /// `g(v, w)` at `q`.
    pub fn inner(&self, q: &[f64], v: &[f64], w: &[f64]) -> f64 {
        let d = self.dim;
        let g = self.metric(q);
        (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| g[i * d + j] * v[i] * w[j]).sum()
    }

    pub fn norm(&self, q: &[f64], v: &[f64]) -> f64 {
        self.inner(q, v, v).sqrt()
    }

    /// Dual pairing of covectors through `g^{-1}`.
    pub fn covector_norm(&self, q: &[f64], w: &[f64]) -> f64 {
        let d = self.dim;
        let gi = self.inverse_metric(q);
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += gi[i * d + j] * w[i] * w[j];
            }
        }
        s.sqrt()
    }
}

fn contorsion(g: &[Expr], t: &[Expr], d: usize) -> Vec<Expr> {
    let gi = symbolic_inverse(g, d);
    let lower = |l: usize, i: usize, j: usize| {
        let mut acc = Expr::num(0.0);
        for m in 0..d {
            acc = acc + g[l * d + m].clone() * t[(m * d + i) * d + j].clone();
        }
        acc
    };
    let mut out = Vec::with_capacity(d * d * d);
    for k in 0..d {
        for i in 0..d {
            for j in 0..d {
                let mut acc = Expr::num(0.0);
                for l in 0..d {
                    let kl = Expr::num(0.5) * (lower(l, i, j) + lower(i, l, j) + lower(j, l, i));
                    acc = acc + gi[k * d + l].clone() * kl;
                }
                out.push(acc);
            }
        }
    }
    out
}

fn det_small(m: &[f64], d: usize) -> f64 {
    if d == 1 {
        m[0]
    } else {
        m[0] * m[3] - m[1] * m[2]
    }
}

fn invert_small(m: &[f64], d: usize) -> Vec<f64> {
    let det = det_small(m, d);
    if d == 1 {
        vec![1.0 / det]
    } else {
        vec![m[3] / det, -m[1] / det, -m[2] / det, m[0] / det]
    }
}

fn min_eigen(m: &[f64], d: usize) -> f64 {
    if d == 1 {
        return m[0];
    }
    let tr = 0.5 * (m[0] + m[3]);
    let disc = (0.25 * (m[0] - m[3]).powi(2) + 0.25 * (m[1] + m[2]).powi(2)).sqrt();
    tr - disc
}

/// One sample along a geodesic.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicSample {
    pub tau: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicPath {
    pub base: Vec<f64>,
    pub velocity: Vec<f64>,
    pub samples: Vec<GeodesicSample>,
    /// Accumulated local error estimate of the integrator.
    pub error_estimate: f64,
}

impl GeodesicPath {
    pub fn end(&self) -> &[f64] {
        &self.samples.last().expect("geodesic has samples").q
    }

    /// Largest deviation of `g(qdot, qdot)` from its initial value.
    pub fn speed_drift(&self, chart: &ManifoldChart) -> f64 {
        let e0 = chart.inner(&self.base, &self.velocity, &self.velocity);
        self.samples.iter().map(|s| (chart.inner(&s.q, &s.qdot, &s.qdot) - e0).abs()).fold(0.0, f64::max)
    }
}

/// Vector or covector carried along a geodesic.
#[derive(Debug, Clone, PartialEq)]
pub enum Carried {
    Vector(Vec<f64>),
    Covector(Vec<f64>),
}

impl Carried {
    pub fn components(&self) -> &[f64] {
        match self {
            Carried::Vector(v) | Carried::Covector(v) => v,
        }
    }
}

struct Layout {
    d: usize,
    jacobian: bool,
    carried: Vec<bool>,
}

impl Layout {
    fn len(&self) -> usize {
        let d = self.d;
        2 * d + if self.jacobian { 2 * d * d } else { 0 } + d * self.carried.len()
    }
    fn carried_at(&self, c: usize) -> usize {
        let d = self.d;
        2 * d + if self.jacobian { 2 * d * d } else { 0 } + d * c
    }
}

struct Shot {
    end: Vec<f64>,
    jacobian: Option<Vec<f64>>,
    carried: Vec<Vec<f64>>,
    samples: Vec<GeodesicSample>,
    error: f64,
}

impl ManifoldChart {
    fn rhs(&self, layout: &Layout, y: &[f64], dy: &mut [f64]) {
        let d = layout.d;
        let q = &y[..d];
        let u = &y[d..2 * d];
        let gm = self.christoffel(q);
        let g = |k: usize, i: usize, j: usize| gm[(k * d + i) * d + j];
        for k in 0..d {
            dy[k] = u[k];
            let mut acc = 0.0;
            for i in 0..d {
                for j in 0..d {
                    acc += g(k, i, j) * u[i] * u[j];
                }
            }
            dy[d + k] = -acc;
        }
        if layout.jacobian {
            let dgm = self.christoffel_derivs(q);
            for a in 0..d {
                let off = 2 * d + 2 * d * a;
                let (dq, du) = (&y[off..off + d], &y[off + d..off + 2 * d]);
                for k in 0..d {
                    dy[off + k] = du[k];
                    let mut acc = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            let mut dgam = 0.0;
                            for m in 0..d {
                                dgam += dgm[((m * d + k) * d + i) * d + j] * dq[m];
                            }
                            acc += dgam * u[i] * u[j] + (g(k, i, j) + g(k, j, i)) * u[j] * du[i];
                        }
                    }
                    dy[off + d + k] = -acc;
                }
            }
        }
        for (c, &is_vector) in layout.carried.iter().enumerate() {
            let off = layout.carried_at(c);
            let w = &y[off..off + d];
            for k in 0..d {
                let mut acc = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        acc += if is_vector { -g(k, i, j) * u[i] * w[j] } else { g(j, i, k) * u[i] * w[j] };
                    }
                }
                dy[off + k] = acc;
            }
        }
    }

    fn shoot(&self, q: &[f64], v: &[f64], jacobian: bool, carried: &[Carried], taus: &[f64]) -> Result<Shot> {
        let d = self.dim;
        if q.len() != d || v.len() != d || carried.iter().any(|c| c.components().len() != d) {
            return Err(GeomError::InvalidChart(format!("expected {d} components")));
        }
        if !self.contains(q) {
            return Err(GeomError::LeftDomain { at: q.to_vec(), tau: 0.0 });
        }
        let layout = Layout { d, jacobian, carried: carried.iter().map(|c| matches!(c, Carried::Vector(_))).collect() };
        let mut y = vec![0.0; layout.len()];
        y[..d].copy_from_slice(q);
        y[d..2 * d].copy_from_slice(v);
        if jacobian {
            for a in 0..d {
                y[2 * d + 2 * d * a + d + a] = 1.0;
            }
        }
        for (c, w) in carried.iter().enumerate() {
            let off = layout.carried_at(c);
            y[off..off + d].copy_from_slice(w.components());
        }
        let mut samples = vec![GeodesicSample { tau: 0.0, q: q.to_vec(), qdot: v.to_vec() }];
        let mut left = false;
        let result = dopri45(
            |_, y, dy| self.rhs(&layout, y, dy),
            0.0,
            &mut y,
            taus,
            ODE_TOL,
            |tau, y, at_stop| {
                if !self.contains(&y[..d]) {
                    left = true;
                    return false;
                }
                if at_stop {
                    samples.push(GeodesicSample { tau, q: y[..d].to_vec(), qdot: y[d..2 * d].to_vec() });
                }
                true
            },
        );
        let error = match result {
            Ok(e) => e,
            Err(stop) => {
                let tau = match stop {
                    OdeStop::Rejected { t } | OdeStop::NonFinite { t } | OdeStop::StepUnderflow { t } | OdeStop::TooManySteps { t } => t,
                };
                let at = y[..d].to_vec();
                return Err(if left { GeomError::LeftDomain { at, tau } } else { GeomError::StepFailure { at, tau } });
            }
        };
        let jac = jacobian.then(|| {
            let mut j = vec![0.0; d * d];
            for a in 0..d {
                for k in 0..d {
                    j[k * d + a] = y[2 * d + 2 * d * a + k];
                }
            }
            j
        });
        Ok(Shot {
            end: y[..d].to_vec(),
            jacobian: jac,
            carried: (0..carried.len()).map(|c| y[layout.carried_at(c)..layout.carried_at(c) + d].to_vec()).collect(),
            samples,
            error,
        })
    }

    /// `exp_q(v)`: the autoparallel from `q` with velocity `v` at `tau = 1`.
    pub fn exp_map(&self, q: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.shoot(q, v, false, &[], &[1.0])?.end)
    }

    /// `exp_q(tau v)` at each of the sorted `taus` in `(0, 1]`.
    pub fn exp_ray(&self, q: &[f64], v: &[f64], taus: &[f64]) -> Result<Vec<Vec<f64>>> {
        let shot = self.shoot(q, v, false, &[], taus)?;
        Ok(shot.samples.into_iter().skip(1).map(|s| s.q).collect())
    }

    /// Geodesic sampled at `samples + 1` equally spaced parameters.
    pub fn geodesic(&self, q: &[f64], v: &[f64], samples: usize) -> Result<GeodesicPath> {
        let n = samples.max(1);
        let taus: Vec<f64> = (1..=n).map(|k| k as f64 / n as f64).collect();
        let shot = self.shoot(q, v, false, &[], &taus)?;
        Ok(GeodesicPath { base: q.to_vec(), velocity: v.to_vec(), samples: shot.samples, error_estimate: shot.error })
    }

    /// Tangent vector `v` at `q` with `exp_q(v) = q2`, by Newton shooting.
    pub fn log_map(&self, q: &[f64], q2: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        if !self.contains(q2) {
            return Err(GeomError::LeftDomain { at: q2.to_vec(), tau: 1.0 });
        }
        // second-order normal-coordinate guess: v = dq + Gamma(dq, dq) / 2
        let gm = self.christoffel(q);
        let dq: Vec<f64> = (0..d).map(|k| q2[k] - q[k]).collect();
        let mut v: Vec<f64> = (0..d)
            .map(|k| {
                let mut acc = dq[k];
                for i in 0..d {
                    for j in 0..d {
                        acc += 0.5 * gm[(k * d + i) * d + j] * dq[i] * dq[j];
                    }
                }
                acc
            })
            .collect();
        let scale = 1.0 + q2.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let mut residual = f64::INFINITY;
        let mut last_good: Option<(Vec<f64>, f64)> = None;
        for _ in 0..LOG_MAX_ITER {
            let shot = match self.shoot(q, &v, true, &[], &[1.0]) {
                Ok(s) => s,
                Err(_) => match &last_good {
                    // damp back towards the last successful shot
                    Some((good, _)) => {
                        v = v.iter().zip(good).map(|(a, b)| 0.5 * (a + b)).collect();
                        continue;
                    }
                    None => {
                        v = dq.clone();
                        last_good = Some((vec![0.0; d], f64::INFINITY));
                        continue;
                    }
                },
            };
            let f: Vec<f64> = (0..d).map(|k| shot.end[k] - q2[k]).collect();
            residual = f.iter().map(|x| x.abs()).fold(0.0, f64::max);
            if residual <= 1e-13 * scale {
                return Ok(v);
            }
            last_good = Some((v.clone(), residual));
            let j = shot.jacobian.expect("jacobian requested");
            let step = solve_small(&j, &f, d).ok_or(GeomError::OutsideNormalNeighborhood { residual })?;
            for k in 0..d {
                v[k] -= step[k];
            }
        }
        if residual <= 1e-11 * scale {
            return Ok(v);
        }
        Err(GeomError::OutsideNormalNeighborhood { residual })
    }

    /// Carry `w` from `q` along the geodesic with initial velocity `v`;
    /// returns the endpoint and the transported components.
    pub fn transport_along(&self, q: &[f64], v: &[f64], w: &Carried) -> Result<(Vec<f64>, Vec<f64>)> {
        let shot = self.shoot(q, v, false, std::slice::from_ref(w), &[1.0])?;
        Ok((shot.end, shot.carried.into_iter().next().expect("one carried field")))
    }

    /// Parallel transport of `w` from `q` to `q2` along the connecting
    /// geodesic.
    pub fn parallel_transport(&self, q: &[f64], q2: &[f64], w: &Carried) -> Result<Vec<f64>> {
        let v = self.log_map(q, q2)?;
        Ok(self.transport_along(q, &v, w)?.1)
    }
}

fn solve_small(j: &[f64], f: &[f64], d: usize) -> Option<Vec<f64>> {
    let det = det_small(j, d);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let inv = invert_small(j, d);
    Some((0..d).map(|k| (0..d).map(|l| inv[k * d + l] * f[l]).sum()).collect())
}

/// Per-sample radius of the normal neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalNeighborhood {
    pub samples: Vec<(Vec<f64>, f64)>,
    pub symmetric_checks: usize,
    pub symmetric_failures: usize,
}

impl NormalNeighborhood {
    pub fn min_radius(&self) -> f64 {
        self.samples.iter().map(|s| s.1).fold(f64::INFINITY, f64::min)
    }

    /// Radius at the nearest sample.
    pub fn radius_near(&self, q: &[f64]) -> f64 {
        let dist = |a: &[f64]| a.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        self.samples
            .iter()
            .min_by(|a, b| dist(&a.0).total_cmp(&dist(&b.0)))
            .map_or(0.0, |s| s.1)
    }

    /// Same radius everywhere, for charts where it is known.
    pub fn uniform(rho: f64) -> Self {
        NormalNeighborhood { samples: vec![(vec![], rho)], symmetric_checks: 0, symmetric_failures: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalOptions {
    pub per_axis: usize,
    pub directions: usize,
    pub max_radius: f64,
    /// Inset of the sample lattice, as a fraction of the box.
    pub margin: f64,
}

impl Default for NormalOptions {
    fn default() -> Self {
        NormalOptions { per_axis: 3, directions: 8, max_radius: 10.0, margin: 0.0 }
    }
}

/// Largest radius with successful exp/log round trips on a fan of rays from
/// each lattice point, then a symmetric-membership check at half radius.
pub fn estimate_normal_radius(chart: &ManifoldChart, opts: &NormalOptions) -> NormalNeighborhood {
    let d = chart.dim();
    let dirs: Vec<Vec<f64>> = if d == 1 {
        vec![vec![1.0], vec![-1.0]]
    } else {
        (0..opts.directions.max(1))
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / opts.directions.max(1) as f64;
                vec![a.cos(), a.sin()]
            })
            .collect()
    };
    let unit = |q: &[f64], e: &[f64]| -> Vec<f64> {
        let n = chart.norm(q, e);
        e.iter().map(|x| x / n).collect()
    };
    let round_trip = |q: &[f64], u: &[f64], r: f64| -> bool {
        let v: Vec<f64> = u.iter().map(|x| x * r).collect();
        match chart.exp_map(q, &v).and_then(|q2| chart.log_map(q, &q2)) {
            Ok(back) => back.iter().zip(&v).all(|(a, b)| (a - b).abs() <= ROUND_TRIP_TOL * (1.0 + r)),
            Err(_) => false,
        }
    };
    let base = chart.lattice(opts.per_axis, opts.margin);
    let samples: Vec<(Vec<f64>, f64)> = base
        .par_iter()
        .map(|q| {
            let mut rho = opts.max_radius;
            for e in &dirs {
                let u = unit(q, e);
                let steps = 16;
                let mut good = 0.0;
                let mut bad = None;
                for k in 1..=steps {
                    let r = opts.max_radius * k as f64 / steps as f64;
                    if r > rho {
                        break;
                    }
                    if round_trip(q, &u, r) {
                        good = r;
                    } else {
                        bad = Some(r);
                        break;
                    }
                }
                if let Some(mut hi) = bad {
                    let mut lo = good;
                    for _ in 0..12 {
                        let mid = 0.5 * (lo + hi);
                        if round_trip(q, &u, mid) {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    good = lo;
                }
                rho = rho.min(good);
            }
            (q.clone(), rho)
        })
        .collect();
    let mut checks = 0;
    let mut failures = 0;
    for (q, rho) in &samples {
        if *rho <= 0.0 {
            continue;
        }
        for e in &dirs {
            let u = unit(q, e);
            let r = 0.5 * rho;
            let v: Vec<f64> = u.iter().map(|x| x * r).collect();
            checks += 1;
            let ok = chart
                .exp_map(q, &v)
                .and_then(|q2| chart.log_map(&q2, q).map(|w| (q2, w)))
                .map(|(q2, w)| (chart.norm(&q2, &w) - r).abs() <= 1e-6 * (1.0 + r))
                .unwrap_or(false);
            if !ok {
                failures += 1;
            }
        }
    }
    NormalNeighborhood { samples, symmetric_checks: checks, symmetric_failures: failures }
}

/// Sampled sup-norms of curvature, torsion and their covariant derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryReport {
    pub order: usize,
    pub samples: usize,
    /// `sup |nabla^k R|_g`, `k = 0..=order`.
    pub curvature: Vec<f64>,
    /// `sup |nabla^k T|_g`, `k = 0..=order`.
    pub torsion: Vec<f64>,
    pub scalar_curvature: (f64, f64),
    pub min_metric_eigen: f64,
}

#[derive(Clone, Copy)]
enum Field {
    Curvature,
    Torsion,
}

impl ManifoldChart {
    /// Components of `nabla^order` of a `(1, m)` tensor, new lower indices
    /// appended last.
    fn covariant_field(&self, field: Field, order: usize, q: &[f64]) -> Vec<f64> {
        let d = self.dim;
        if order == 0 {
            return match field {
                Field::Curvature => self.curvature(q),
                Field::Torsion => self.torsion(q),
            };
        }
        let base = self.covariant_field(field, order - 1, q);
        let rank_low = self.lower_rank(field) + order - 1;
        let h = 1e-2;
        let count = base.len();
        let mut out = vec![0.0; count * d];
        let gm = self.christoffel(q);
        let g = |k: usize, i: usize, j: usize| gm[(k * d + i) * d + j];
        for c in 0..d {
            let shifted = |s: f64| {
                let mut x = q.to_vec();
                x[c] += s * h;
                self.covariant_field(field, order - 1, &x)
            };
            let (f2, f1, m1, m2) = (shifted(2.0), shifted(1.0), shifted(-1.0), shifted(-2.0));
            for idx in 0..count {
                let mut v = (8.0 * (f1[idx] - m1[idx]) - (f2[idx] - m2[idx])) / (12.0 * h);
                let digits = index_digits(idx, d, rank_low + 1);
                // upper index
                for n in 0..d {
                    let mut dig = digits.clone();
                    dig[0] = n;
                    v += g(digits[0], c, n) * base[digits_index(&dig, d)];
                }
                for s in 1..=rank_low {
                    for n in 0..d {
                        let mut dig = digits.clone();
                        dig[s] = n;
                        v -= g(n, c, digits[s]) * base[digits_index(&dig, d)];
                    }
                }
                out[idx * d + c] = v;
            }
        }
        out
    }

    fn lower_rank(&self, field: Field) -> usize {
        match field {
            Field::Curvature => 3,
            Field::Torsion => 2,
        }
    }

    /// g-norm of a `(1, m)` tensor with `m = lower`.
    fn tensor_norm(&self, q: &[f64], comps: &[f64], lower: usize) -> f64 {
        let d = self.dim;
        let g = self.metric(q);
        let gi = invert_small(&g, d);
        let total = lower + 1;
        let mut s = 0.0;
        for a in 0..comps.len() {
            let da = index_digits(a, d, total);
            for b in 0..comps.len() {
                let db = index_digits(b, d, total);
                let mut w = g[da[0] * d + db[0]];
                for t in 1..total {
                    w *= gi[da[t] * d + db[t]];
                }
                s += w * comps[a] * comps[b];
            }
        }
        s.max(0.0).sqrt()
    }
}

fn index_digits(mut idx: usize, d: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for slot in (0..len).rev() {
        out[slot] = idx % d;
        idx /= d;
    }
    out
}

fn digits_index(digits: &[usize], d: usize) -> usize {
    digits.iter().fold(0, |acc, &x| acc * d + x)
}

/// Sup-norms over a `per_axis` lattice inset by 10% of the box.
pub fn bounded_geometry_report(chart: &ManifoldChart, order: usize, per_axis: usize) -> GeometryReport {
    let pts = chart.lattice(per_axis, 0.1);
    let rows: Vec<(Vec<f64>, Vec<f64>, f64, f64)> = pts
        .par_iter()
        .map(|q| {
            let mut curv = Vec::new();
            let mut tors = Vec::new();
            for k in 0..=order {
                let r = chart.covariant_field(Field::Curvature, k, q);
                curv.push(chart.tensor_norm(q, &r, 3 + k));
                let t = chart.covariant_field(Field::Torsion, k, q);
                tors.push(chart.tensor_norm(q, &t, 2 + k));
            }
            (curv, tors, chart.scalar_curvature(q), min_eigen(&chart.metric(q), chart.dim()))
        })
        .collect();
    let mut report = GeometryReport {
        order,
        samples: pts.len(),
        curvature: vec![0.0; order + 1],
        torsion: vec![0.0; order + 1],
        scalar_curvature: (f64::INFINITY, f64::NEG_INFINITY),
        min_metric_eigen: f64::INFINITY,
    };
    for (c, t, s, e) in rows {
        for k in 0..=order {
            report.curvature[k] = report.curvature[k].max(c[k]);
            report.torsion[k] = report.torsion[k].max(t[k]);
        }
        report.scalar_curvature = (report.scalar_curvature.0.min(s), report.scalar_curvature.1.max(s));
        report.min_metric_eigen = report.min_metric_eigen.min(e);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn sphere() -> ManifoldChart {
        ManifoldChart::new(&ChartSpec::sphere_stereographic(20.0)).unwrap()
    }

    #[test]
    fn christoffel_examples() {
        let flat = ManifoldChart::euclidean(vec![[-1.0, 1.0], [-1.0, 1.0]]).unwrap();
        assert!(flat.christoffel(&[0.3, 0.1]).iter().all(|g| *g == 0.0));
        let s = ManifoldChart::new(&ChartSpec::sphere_colatitude(0.1)).unwrap();
        let th = 0.7;
        let gm = s.christoffel(&[th, 0.2]);
        // [k][i][j]: theta = 0, phi = 1
        assert!((gm[3] + th.sin() * th.cos()).abs() < 1e-14);
        assert!((gm[5] - 1.0 / th.tan()).abs() < 1e-14 && (gm[6] - 1.0 / th.tan()).abs() < 1e-14);
        let line = ManifoldChart::new(&ChartSpec::exponential_line(-1.0, 1.0)).unwrap();
        assert!((line.christoffel(&[0.4])[0] - 1.0).abs() < 1e-14);
        assert!(s.metric_compatibility_residual(&[th, 0.0]) < 1e-12);
    }

    #[test]
    fn rejects_bad_charts() {
        let mut spec = ChartSpec::euclidean(vec![[-1.0, 1.0]]);
        spec.metric = vec!["q".into()];
        assert!(matches!(ManifoldChart::new(&spec), Err(GeomError::NotPositiveDefinite { .. })));
        spec.metric = vec!["1".into(), "2".into()];
        assert!(matches!(ManifoldChart::new(&spec), Err(GeomError::InvalidChart(_))));
        let spec = ChartSpec::euclidean(vec![[1.0, -1.0]]);
        assert!(ManifoldChart::new(&spec).is_err());
        let mut spec = ChartSpec::euclidean(vec![[-1.0, 1.0]]);
        spec.metric = vec!["1 +".into()];
        assert!(matches!(ManifoldChart::new(&spec), Err(GeomError::Expr(_))));
    }

    #[test]
    fn flat_exp_and_log() {
        let flat = ManifoldChart::euclidean(vec![[-2.0, 2.0], [-2.0, 2.0]]).unwrap();
        let e = flat.exp_map(&[0.1, 0.2], &[0.5, -0.3]).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-14 && (e[1] + 0.1).abs() < 1e-14);
        let l = flat.log_map(&[0.1, 0.2], &[1.0, 1.0]).unwrap();
        assert!((l[0] - 0.9).abs() < 1e-14 && (l[1] - 0.8).abs() < 1e-14);
        assert!(matches!(flat.exp_map(&[0.0, 0.0], &[3.0, 0.0]), Err(GeomError::LeftDomain { .. })));
    }

    #[test]
    fn sphere_meridian_reaches_pole() {
        let s = sphere();
        // equator point (1, 0); metric factor there is 1
        let v = [-FRAC_PI_2, 0.0];
        let pole = s.exp_map(&[1.0, 0.0], &v).unwrap();
        assert!(pole[0].abs() < 1e-9 && pole[1].abs() < 1e-9);
        let back = s.log_map(&[1.0, 0.0], &pole).unwrap();
        assert!((back[0] - v[0]).abs() < 1e-8 && back[1].abs() < 1e-8);
        let path = s.geodesic(&[0.3, -0.2], &[0.4, 0.9], 20).unwrap();
        assert!(path.speed_drift(&s) < 1e-8);
    }

    #[test]
    fn exponential_line_round_trip() {
        let line = ManifoldChart::new(&ChartSpec::exponential_line(-2.0, 2.0)).unwrap();
        let q2 = line.exp_map(&[0.0], &[0.8]).unwrap();
        // distance e^{q2} - 1 equals |v|_g
        assert!((q2[0].exp() - 1.0 - 0.8).abs() < 1e-9);
        let v = line.log_map(&[0.0], &q2).unwrap();
        assert!((v[0] - 0.8).abs() < 1e-8);
    }

    #[test]
    fn octant_holonomy_is_quarter_turn() {
        let s = sphere();
        let legs = [([0.0, 0.0], [1.0, 0.0]), ([1.0, 0.0], [0.0, 1.0]), ([0.0, 1.0], [0.0, 0.0])];
        let mut w = vec![1.0, 0.0];
        for (a, b) in legs {
            w = s.parallel_transport(&a, &b, &Carried::Vector(w)).unwrap();
        }
        let angle = w[1].atan2(w[0]).abs();
        assert!((angle - FRAC_PI_2).abs() < 1e-6, "{angle}");
        assert!((s.norm(&[0.0, 0.0], &w) - 2.0).abs() < 1e-8);
    }

    #[test]
    fn transport_is_isometric_and_dual() {
        let s = sphere();
        let (q, v) = ([0.2, -0.4], [0.7, 0.5]);
        let w = vec![0.3, -1.1];
        let c = vec![0.8, 0.25];
        let (end, wt) = s.transport_along(&q, &v, &Carried::Vector(w.clone())).unwrap();
        let (_, ct) = s.transport_along(&q, &v, &Carried::Covector(c.clone())).unwrap();
        assert!((s.norm(&q, &w) - s.norm(&end, &wt)).abs() < 1e-8);
        let pair0 = w[0] * c[0] + w[1] * c[1];
        let pair1 = wt[0] * ct[0] + wt[1] * ct[1];
        assert!((pair0 - pair1).abs() < 1e-8);
    }

    #[test]
    fn sphere_curvature() {
        let s = sphere();
        for q in [[0.0, 0.0], [0.5, -0.3], [1.5, 2.0]] {
            assert!((s.scalar_curvature(&q) - 2.0).abs() < 1e-8);
            assert!((s.sectional_curvature(&q).unwrap() - 1.0).abs() < 1e-8);
            assert!(s.torsion(&q).iter().all(|t| t.abs() < 1e-14));
        }
        let flat = ManifoldChart::euclidean(vec![[-1.0, 1.0], [-1.0, 1.0]]).unwrap();
        let (r, t) = flat.curvature_torsion(&[0.2, 0.3]);
        assert!(r.iter().chain(&t).all(|x| *x == 0.0));
    }

    fn torsion_chart(mode: TorsionMode) -> ManifoldChart {
        let mut spec = ChartSpec::euclidean(vec![[-3.0, 3.0], [-3.0, 3.0]]);
        spec.torsion = vec!["0.4".into(), "-0.3".into()];
        spec.torsion_mode = mode;
        ManifoldChart::new(&spec).unwrap()
    }

    #[test]
    fn pure_torsion_moves_transport_not_geodesics() {
        let flat = ManifoldChart::euclidean(vec![[-3.0, 3.0], [-3.0, 3.0]]).unwrap();
        let tor = torsion_chart(TorsionMode::Pure);
        assert!(!tor.is_metric_compatible());
        let (q, v) = ([0.1, 0.2], [1.0, 0.5]);
        let a = flat.exp_map(&q, &v).unwrap();
        let b = tor.exp_map(&q, &v).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-10));
        let t = tor.torsion(&q);
        assert!((t[1] - 0.4).abs() < 1e-14 && (t[5] + 0.3).abs() < 1e-14);
        // constant connection: w(1) = exp(A) w, A^k_j = -Gamma^k_ij v^i
        let gm = tor.christoffel(&q);
        let mut a = [[0.0; 2]; 2];
        for (k, row) in a.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = -(0..2).map(|i| gm[(k * 2 + i) * 2 + j] * v[i]).sum::<f64>();
            }
        }
        let am = nalgebra::Matrix2::new(a[0][0], a[0][1], a[1][0], a[1][1]);
        let expect = am.exp() * nalgebra::Vector2::new(1.0, 0.0);
        let (_, w) = tor.transport_along(&q, &v, &Carried::Vector(vec![1.0, 0.0])).unwrap();
        assert!((w[0] - expect[0]).abs() < 1e-9 && (w[1] - expect[1]).abs() < 1e-9);
        assert!((w[0] - 1.0).abs() + w[1].abs() > 1e-3);
    }

    #[test]
    fn contorsion_is_metric() {
        let c = torsion_chart(TorsionMode::Contorsion);
        assert!(c.is_metric_compatible());
        assert!(c.metric_compatibility_residual(&[0.5, 0.5]) < 1e-12);
        let t = c.torsion(&[0.0, 0.0]);
        assert!((t[1] - 0.4).abs() < 1e-14 && (t[5] + 0.3).abs() < 1e-14);
        let (end, w) = c.transport_along(&[0.0, 0.0], &[0.5, 0.2], &Carried::Vector(vec![0.3, 0.4])).unwrap();
        assert!((c.norm(&end, &w) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn normal_radius_examples() {
        let flat = ManifoldChart::euclidean(vec![[-1.0, 1.0], [-1.0, 1.0]]).unwrap();
        let opts = NormalOptions { per_axis: 1, directions: 4, max_radius: 4.0, margin: 0.0 };
        let nn = estimate_normal_radius(&flat, &opts);
        assert!((nn.min_radius() - 1.0).abs() < 1e-3, "{}", nn.min_radius());
        assert_eq!(nn.symmetric_failures, 0);
        let s = sphere();
        let opts = NormalOptions { per_axis: 1, directions: 4, max_radius: 4.0, margin: 0.0 };
        let rho = estimate_normal_radius(&s, &opts).min_radius();
        assert!(rho > PI - 0.15 && rho < PI, "{rho}");
        let line = ManifoldChart::new(&ChartSpec::exponential_line(-1.0, 1.0)).unwrap();
        let nn = estimate_normal_radius(&line, &NormalOptions { per_axis: 1, ..Default::default() });
        // from q = 0 the nearer boundary is q = -1 at distance 1 - e^{-1}
        assert!((nn.min_radius() - (1.0 - (-1f64).exp())).abs() < 1e-3);
    }

    #[test]
    fn geometry_report_bounds() {
        let s = ManifoldChart::new(&ChartSpec::sphere_stereographic(2.0)).unwrap();
        let rep = bounded_geometry_report(&s, 2, 3);
        // |R|_g^2 = 4 K^2 on a surface
        assert!((rep.curvature[0] - 2.0).abs() < 1e-8, "{:?}", rep.curvature);
        assert!(rep.curvature[1] < 1e-6 && rep.curvature[2] < 1e-5, "{:?}", rep.curvature);
        assert!(rep.torsion.iter().all(|t| *t < 1e-10));
        assert!((rep.scalar_curvature.0 - 2.0).abs() < 1e-8);
        let tor = torsion_chart(TorsionMode::Contorsion);
        let rep = bounded_geometry_report(&tor, 1, 2);
        assert!(rep.torsion[0] > 0.1);
    }
}
