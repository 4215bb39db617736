//! Flat phase-space symbol calculus: grids, ordering rules, symbol fields,
//! operator kernels, quantization, rule transforms, composition and
//! quasi-Hamiltonian diagnostics.

mod compose;
mod diagnose;
mod omega;
mod quantize;

pub use compose::{compose_standard, compose_standard_at, compose_standard_checked, quadrature_tail};
pub use diagnose::{diagnose, DiagnoseOptions, DiagnosticReport, MultiIndexBound, QuasiHamiltonian};
pub use omega::{omega_transform, omega_transform_with, OmegaMethod};
pub use quantize::{
    standard_quantize, standard_symbol_of, weyl_dequantize, weyl_dequantize_with, weyl_quantize,
    weyl_quantize_fn, weyl_quantize_scalar_fn, weyl_quantize_with, HalfPoint,
};

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::expr::{parse_expression, Expr, ExprError};

pub type C64 = Complex64;

/// Relative edge magnitude below which a field counts as decayed.
pub const EDGE_TOL: f64 = 1e-12;
/// Floor for `|Omega|` on evaluated frequencies.
pub const OMEGA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymcalcError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("expected a {expected} symbol, found {found}")]
    RuleMismatch { expected: String, found: String },
    #[error("grid too small: symbol edge magnitude {edge:e} (relative) exceeds {EDGE_TOL:e}")]
    GridTooSmall { edge: f64 },
    #[error("Omega has (near-)zeroes; hbar-asymptotic regime unsupported (|Omega| = {modulus:e} at x = {x}, y = {y})")]
    OmegaNearZero { x: f64, y: f64, modulus: f64 },
    #[error("rule change amplifies frequencies by {amplification:e}; exceeds 1e12")]
    IllConditioned { amplification: f64 },
    #[error("series truncated with tail estimate {estimate:e}")]
    SeriesTruncation { estimate: f64 },
    #[error("quadrature did not converge: estimate {estimate:e} above tolerance {tol:e}")]
    QuadratureNonconvergence { estimate: f64, tol: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("invalid Hamiltonian: {0}")]
    InvalidHamiltonian(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

pub type Result<T> = std::result::Result<T, SymcalcError>;

/// Uniform periodic phase-space grid. Positions `q_j = q_min + j dq` for
/// `j < n`; momenta `p_k = (k - n/2) dp` with `dp = 2 pi hbar / L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseGrid {
    d: usize,
    q_min: f64,
    q_max: f64,
    n: usize,
    hbar: f64,
}

impl PhaseGrid {
    pub fn new(q_min: f64, q_max: f64, n: usize, hbar: f64) -> Result<Self> {
        Self::with_dimension(1, q_min, q_max, n, hbar)
    }

    pub fn with_dimension(d: usize, q_min: f64, q_max: f64, n: usize, hbar: f64) -> Result<Self> {
        if d != 1 {
            return Err(SymcalcError::InvalidGrid(format!("dimension {d} unsupported; only d = 1")));
        }
        if n < 8 || !n.is_power_of_two() {
            return Err(SymcalcError::InvalidGrid(format!("n_q = {n} must be a power of two >= 8")));
        }
        if !(q_min.is_finite() && q_max.is_finite() && q_max > q_min) {
            return Err(SymcalcError::InvalidGrid(format!("extent [{q_min}, {q_max}] must be finite and nonempty")));
        }
        if !(hbar.is_finite() && hbar > 0.0) {
            return Err(SymcalcError::InvalidGrid(format!("hbar = {hbar} must be positive")));
        }
        Ok(PhaseGrid { d, q_min, q_max, n, hbar })
    }

    /// Symmetric grid `[-half_width, half_width)`.
    pub fn symmetric(half_width: f64, n: usize, hbar: f64) -> Result<Self> {
        Self::new(-half_width, half_width, n, hbar)
    }

    pub fn dimension(&self) -> usize {
        self.d
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn hbar(&self) -> f64 {
        self.hbar
    }
    pub fn q_min(&self) -> f64 {
        self.q_min
    }
    pub fn q_max(&self) -> f64 {
        self.q_max
    }
    pub fn extent(&self) -> f64 {
        self.q_max - self.q_min
    }
    pub fn dq(&self) -> f64 {
        self.extent() / self.n as f64
    }
    pub fn dp(&self) -> f64 {
        2.0 * PI * self.hbar / self.extent()
    }
    pub fn q(&self, j: usize) -> f64 {
        self.q_min + j as f64 * self.dq()
    }
    pub fn p(&self, k: usize) -> f64 {
        (k as f64 - (self.n / 2) as f64) * self.dp()
    }
    /// Position on the half-step lattice, `c` in `0..2n`.
    pub fn q_half(&self, c: usize) -> f64 {
        self.q_min + c as f64 * 0.5 * self.dq()
    }
    pub fn p_max(&self) -> f64 {
        (self.n / 2) as f64 * self.dp()
    }
    pub fn q_index(&self, q: f64) -> Option<usize> {
        let x = (q - self.q_min) / self.dq();
        let j = x.round();
        (j >= 0.0 && j < self.n as f64 && (x - j).abs() < 1e-9).then_some(j as usize)
    }
    pub fn p_index(&self, p: f64) -> Option<usize> {
        let x = p / self.dp() + (self.n / 2) as f64;
        let k = x.round();
        (k >= 0.0 && k < self.n as f64 && (x - k).abs() < 1e-9).then_some(k as usize)
    }
    pub fn nearest_q_index(&self, q: f64) -> usize {
        ((q - self.q_min) / self.dq()).round().clamp(0.0, (self.n - 1) as f64) as usize
    }
    pub fn nearest_p_index(&self, p: f64) -> usize {
        (p / self.dp() + (self.n / 2) as f64).round().clamp(0.0, (self.n - 1) as f64) as usize
    }
    pub fn positions(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.q(j)).collect()
    }
    pub fn momenta(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.p(k)).collect()
    }
    /// Same extent with twice the points.
    pub fn refined(&self) -> PhaseGrid {
        PhaseGrid { n: self.n * 2, ..*self }
    }
}

/// Ordering rule. Each rule is characterised by its multiplier relative
/// to the Weyl rule: a symbol in rule `R` has Fourier transform
/// `m_R(hbar xi_q, hbar xi_p)` times the Weyl one, transform kernel
/// `exp(-i(xi_q q + xi_p p))`. A custom rule `Omega(q, p)` has
/// `m = 1 / Omega`.
#[derive(Debug, Clone, PartialEq)]
pub enum OmegaRule {
    Weyl,
    Standard,
    Wick,
    SParam(f64),
    Custom(CustomOmega),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CustomOmega {
    pub expr: Expr,
    /// Set when the caller certifies Omega has no zeroes anywhere.
    pub certified_nonzero: bool,
}

impl OmegaRule {
    pub fn sparam(s: f64) -> Result<OmegaRule> {
        if !(0.0..=1.0).contains(&s) {
            return Err(SymcalcError::InvalidRule(format!("s = {s} outside [0, 1]")));
        }
        Ok(OmegaRule::SParam(s))
    }

    /// Custom rule from an expression in `q`, `p` (and optionally `hbar`).
    pub fn custom(text: &str, certified_nonzero: bool) -> Result<OmegaRule> {
        let expr = parse_expression(text)?;
        for v in expr.variables() {
            if !matches!(v.as_str(), "q" | "p" | "hbar") {
                return Err(SymcalcError::InvalidRule(format!("Omega may depend on q, p, hbar only; found `{v}`")));
            }
        }
        Ok(OmegaRule::Custom(CustomOmega { expr, certified_nonzero }))
    }

    pub fn name(&self) -> String {
        match self {
            OmegaRule::Weyl => "weyl".into(),
            OmegaRule::Standard => "standard".into(),
            OmegaRule::Wick => "wick".into(),
            OmegaRule::SParam(s) => format!("s={s}"),
            OmegaRule::Custom(c) => format!("omega={}", c.expr),
        }
    }

    /// Multiplier `m(x, y)` relative to Weyl as an expression in `x`, `y`.
    pub fn multiplier(&self, hbar: f64) -> Expr {
        let h = Expr::num(hbar);
        let xy = Expr::var("x") * Expr::var("y");
        match self {
            OmegaRule::Weyl => Expr::num(1.0),
            OmegaRule::Standard => Expr::call(crate::expr::Func::Exp, Expr::Imag * xy / (Expr::num(2.0) * h)),
            OmegaRule::SParam(s) => {
                Expr::call(crate::expr::Func::Exp, Expr::Imag * Expr::num(s - 0.5) * xy / h)
            }
            OmegaRule::Wick => {
                let r2 = Expr::var("x").powi(2) + Expr::var("y").powi(2);
                Expr::call(crate::expr::Func::Exp, -(r2 / (Expr::num(4.0) * h)))
            }
            OmegaRule::Custom(c) => {
                let e = c.expr.substitute("q", &Expr::var("x")).substitute("p", &Expr::var("y"));
                Expr::num(1.0) / e.substitute("hbar", &h)
            }
        }
    }

    /// True when both rules have the same multiplier.
    pub fn equivalent(&self, other: &OmegaRule) -> bool {
        let key = |r: &OmegaRule| match r {
            OmegaRule::Weyl => Some(0.5),
            OmegaRule::Standard => Some(1.0),
            OmegaRule::SParam(s) => Some(*s),
            _ => None,
        };
        match (key(self), key(other)) {
            (Some(a), Some(b)) => a == b,
            _ => self == other,
        }
    }
}

/// Complex (optionally matrix-valued) function sampled on a phase grid.
/// Storage is row-major over `(j, k, a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolField {
    grid: PhaseGrid,
    rule: OmegaRule,
    r: usize,
    values: Vec<C64>,
}

impl SymbolField {
    pub fn new(grid: PhaseGrid, rule: OmegaRule, r: usize, values: Vec<C64>) -> Result<Self> {
        let n = grid.n();
        if r == 0 || values.len() != n * n * r * r {
            return Err(SymcalcError::Shape(format!(
                "{} values for n = {n}, r = {r}",
                values.len()
            )));
        }
        Ok(SymbolField { grid, rule, r, values })
    }

    pub fn from_fn(grid: PhaseGrid, rule: OmegaRule, f: impl Fn(f64, f64) -> C64) -> Self {
        let n = grid.n();
        let mut values = Vec::with_capacity(n * n);
        for j in 0..n {
            for k in 0..n {
                values.push(f(grid.q(j), grid.p(k)));
            }
        }
        SymbolField { grid, rule, r: 1, values }
    }

    pub fn from_fn_matrix(grid: PhaseGrid, rule: OmegaRule, r: usize, mut f: impl FnMut(f64, f64, &mut [C64])) -> Self {
        let n = grid.n();
        let mut values = vec![C64::new(0.0, 0.0); n * n * r * r];
        for j in 0..n {
            for k in 0..n {
                let o = (j * n + k) * r * r;
                f(grid.q(j), grid.p(k), &mut values[o..o + r * r]);
            }
        }
        SymbolField { grid, rule, r, values }
    }

    pub fn constant(grid: PhaseGrid, rule: OmegaRule, v: C64) -> Self {
        Self::from_fn(grid, rule, |_, _| v)
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }
    pub fn rule(&self) -> &OmegaRule {
        &self.rule
    }
    pub fn fiber(&self) -> usize {
        self.r
    }
    pub fn values(&self) -> &[C64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<C64> {
        self.values
    }

    pub fn with_rule(mut self, rule: OmegaRule) -> Self {
        self.rule = rule;
        self
    }

    /// Scalar value at grid indices.
    pub fn at(&self, j: usize, k: usize) -> C64 {
        self.values[(j * self.grid.n() + k) * self.r * self.r]
    }

    pub fn entry(&self, j: usize, k: usize, a: usize, b: usize) -> C64 {
        self.values[((j * self.grid.n() + k) * self.r + a) * self.r + b]
    }

    /// Scalar value at grid coordinates (must lie on the grid).
    pub fn at_point(&self, q: f64, p: f64) -> Option<C64> {
        Some(self.at(self.grid.q_index(q)?, self.grid.p_index(p)?))
    }

    /// One fiber entry as a scalar `n x n` array.
    pub fn component(&self, a: usize, b: usize) -> Vec<C64> {
        let rr = self.r * self.r;
        self.values.iter().skip(a * self.r + b).step_by(rr).copied().collect()
    }

    pub fn set_component(&mut self, a: usize, b: usize, data: &[C64]) {
        let rr = self.r * self.r;
        let off = a * self.r + b;
        for (i, v) in data.iter().enumerate() {
            self.values[i * rr + off] = *v;
        }
    }

    pub fn map(&self, f: impl Fn(f64, f64, C64) -> C64) -> SymbolField {
        let n = self.grid.n();
        let rr = self.r * self.r;
        let mut out = self.clone();
        for (i, v) in out.values.iter_mut().enumerate() {
            let jk = i / rr;
            *v = f(self.grid.q(jk / n), self.grid.p(jk % n), *v);
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Largest magnitude on the outermost two rows/columns of the grid,
    /// relative to the overall maximum: `(q_edge, p_edge)`.
    pub fn edge_magnitude(&self) -> (f64, f64) {
        let n = self.grid.n();
        let rr = self.r * self.r;
        let max = self.max_abs();
        if max == 0.0 {
            return (0.0, 0.0);
        }
        let edge = [0, 1, n - 2, n - 1];
        let mut eq: f64 = 0.0;
        let mut ep: f64 = 0.0;
        for j in 0..n {
            for k in 0..n {
                let o = (j * n + k) * rr;
                let m = self.values[o..o + rr].iter().map(|v| v.norm()).fold(0.0, f64::max);
                if edge.contains(&j) {
                    eq = eq.max(m);
                }
                if edge.contains(&k) {
                    ep = ep.max(m);
                }
            }
        }
        (eq / max, ep / max)
    }

    /// Maximum pointwise difference, optionally restricted to a box
    /// `|q| <= qb, |p| <= pb`.
    pub fn max_diff(&self, other: &SymbolField, region: Option<(f64, f64)>) -> f64 {
        let n = self.grid.n();
        let rr = self.r * self.r;
        let mut m: f64 = 0.0;
        for (i, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            let jk = i / rr;
            if let Some((qb, pb)) = region {
                if self.grid.q(jk / n).abs() > qb || self.grid.p(jk % n).abs() > pb {
                    continue;
                }
            }
            m = m.max((a - b).norm());
        }
        m
    }
}

/// Discretized Schwartz kernel on the position grid. Block `(j'', j')` is
/// an `r x r` matrix; the operator acts as `(A psi)_j'' = sum K psi dq`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorKernel {
    grid: PhaseGrid,
    r: usize,
    matrix: DMatrix<C64>,
}

impl OperatorKernel {
    pub fn new(grid: PhaseGrid, r: usize, matrix: DMatrix<C64>) -> Result<Self> {
        let m = grid.n() * r;
        if r == 0 || matrix.nrows() != m || matrix.ncols() != m {
            return Err(SymcalcError::Shape(format!(
                "kernel {}x{} for n = {}, r = {r}",
                matrix.nrows(),
                matrix.ncols(),
                grid.n()
            )));
        }
        Ok(OperatorKernel { grid, r, matrix })
    }

    pub fn identity(grid: PhaseGrid, r: usize) -> Self {
        let m = grid.n() * r;
        OperatorKernel { grid, r, matrix: DMatrix::identity(m, m) * C64::new(1.0 / grid.dq(), 0.0) }
    }

    /// Kernel of the operator whose action on grid vectors is `op` (so
    /// `K = op / dq`).
    pub fn from_operator(grid: PhaseGrid, r: usize, op: DMatrix<C64>) -> Result<Self> {
        let dq = grid.dq();
        Self::new(grid, r, op / C64::new(dq, 0.0))
    }

    /// Multiplication operator by `h(q)`.
    pub fn multiplication(grid: PhaseGrid, h: impl Fn(f64) -> C64) -> Self {
        let n = grid.n();
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            m[(j, j)] = h(grid.q(j)) / grid.dq();
        }
        OperatorKernel { grid, r: 1, matrix: m }
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }
    pub fn fiber(&self) -> usize {
        self.r
    }
    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }
    pub fn into_matrix(self) -> DMatrix<C64> {
        self.matrix
    }

    /// Matrix acting on grid vectors, `K dq`.
    pub fn operator(&self) -> DMatrix<C64> {
        &self.matrix * C64::new(self.grid.dq(), 0.0)
    }

    pub fn apply(&self, psi: &[C64]) -> Vec<C64> {
        let dq = C64::new(self.grid.dq(), 0.0);
        let v = nalgebra::DVectorView::from_slice(psi, psi.len());
        (&self.matrix * v * dq).as_slice().to_vec()
    }

    /// Kernel of the product `self * other` (other acts first).
    pub fn then_left(&self, other: &OperatorKernel) -> OperatorKernel {
        OperatorKernel { grid: self.grid, r: self.r, matrix: &self.matrix * &other.matrix * C64::new(self.grid.dq(), 0.0) }
    }

    pub fn scaled(&self, s: C64) -> OperatorKernel {
        OperatorKernel { grid: self.grid, r: self.r, matrix: &self.matrix * s }
    }

    pub fn max_abs(&self) -> f64 {
        self.matrix.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// `max |K - K^dagger|` relative to `max |K|`.
    pub fn hermitian_defect(&self) -> f64 {
        let m = self.max_abs().max(f64::MIN_POSITIVE);
        let d = &self.matrix - self.matrix.adjoint();
        d.iter().map(|v| v.norm()).fold(0.0, f64::max) / m
    }

    /// Largest kernel magnitude on rows or columns touching the grid edge,
    /// relative to the maximum.
    pub fn edge_magnitude(&self) -> f64 {
        let n = self.grid.n();
        let r = self.r;
        let max = self.max_abs();
        if max == 0.0 {
            return 0.0;
        }
        let band = |i: usize| {
            let j = i / r;
            j < 2 || j + 2 >= n
        };
        let mut e: f64 = 0.0;
        for c in 0..n * r {
            for rr in 0..n * r {
                if band(rr) || band(c) {
                    e = e.max(self.matrix[(rr, c)].norm());
                }
            }
        }
        e / max
    }

    /// Largest magnitude at separations `|j'' - j'|` near half the grid,
    /// relative to the maximum: a measure of truncation by periodicity.
    pub fn wrap_magnitude(&self) -> f64 {
        let n = self.grid.n();
        let r = self.r;
        let max = self.max_abs();
        if max == 0.0 {
            return 0.0;
        }
        let mut e: f64 = 0.0;
        for c in 0..n * r {
            for rr in 0..n * r {
                let s = (rr / r).abs_diff(c / r);
                let s = s.min(n - s);
                if s + 2 >= n / 2 {
                    e = e.max(self.matrix[(rr, c)].norm());
                }
            }
        }
        e / max
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(PhaseGrid::new(-1.0, 1.0, 12, 1.0).is_err());
        assert!(PhaseGrid::new(-1.0, 1.0, 4, 1.0).is_err());
        assert!(PhaseGrid::new(1.0, 1.0, 16, 1.0).is_err());
        assert!(PhaseGrid::new(-1.0, 1.0, 16, 0.0).is_err());
        assert!(PhaseGrid::with_dimension(2, -1.0, 1.0, 16, 1.0).is_err());
    }

    #[test]
    fn grid_coordinates_round_trip() {
        let g = PhaseGrid::new(-7.3, 11.1, 256, 0.7).unwrap();
        for j in 0..g.n() {
            assert_eq!(g.q_index(g.q(j)), Some(j));
            assert_eq!(g.p_index(g.p(j)), Some(j));
        }
        let ps = g.momenta();
        assert_eq!(ps[g.n() / 2], 0.0);
        assert!((ps[1] + ps[g.n() - 1]).abs() < 1e-12);
        assert!((g.dq() * g.dp() / (2.0 * PI * g.hbar()) - 1.0 / g.n() as f64).abs() < 1e-15);
    }

    #[test]
    fn sparam_one_is_standard() {
        let h = 0.8;
        let a = OmegaRule::SParam(1.0).multiplier(h);
        let b = OmegaRule::Standard.multiplier(h);
        let z = C64::new(0.7, 0.0);
        let y = C64::new(-1.3, 0.0);
        let va = a.eval_with(&[("x", z), ("y", y)]).unwrap();
        let vb = b.eval_with(&[("x", z), ("y", y)]).unwrap();
        assert!((va - vb).norm() < 1e-15);
        assert!(OmegaRule::SParam(1.0).equivalent(&OmegaRule::Standard));
        assert!(OmegaRule::SParam(0.5).equivalent(&OmegaRule::Weyl));
        assert!(OmegaRule::sparam(1.5).is_err());
        assert!(OmegaRule::custom("exp(q*t)", true).is_err());
    }

    #[test]
    fn identity_kernel_has_inverse_dq_diagonal() {
        let g = PhaseGrid::new(-4.0, 4.0, 16, 1.0).unwrap();
        let k = OperatorKernel::identity(g, 1);
        assert!((k.matrix()[(3, 3)].re - 1.0 / g.dq()).abs() < 1e-15);
        let psi: Vec<C64> = (0..16).map(|j| C64::new(j as f64, -1.0)).collect();
        assert_eq!(k.apply(&psi), psi);
    }
}
