//! Quasi-Hamiltonians and sampled checks of their growth and dissipativity.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{PhaseGrid, Result, SymcalcError, C64};
use crate::expr::{parse_expression, Bound, Expr};

/// Highest derivative order kept symbolically.
pub const MAX_DERIV: usize = 3;

fn alpha_index(aq: usize, ap: usize) -> usize {
    let k = aq + ap;
    k * (k + 1) / 2 + ap
}

fn alphas() -> impl Iterator<Item = (usize, usize)> {
    (0..=MAX_DERIV).flat_map(|k| (0..=k).map(move |ap| (k - ap, ap)))
}

/// A time-dependent (matrix) symbol `f(t, q, p)` with its derivatives in
/// `(q, p)` up to third order.
#[derive(Debug, Clone)]
pub struct QuasiHamiltonian {
    entries: Vec<Expr>,
    r: usize,
    order: f64,
    hbar: f64,
    // derivs[entry][alpha_index]
    derivs: Vec<Vec<Bound>>,
    time_independent: bool,
}

impl QuasiHamiltonian {
    /// Scalar quasi-Hamiltonian with `hbar = 1` substituted.
    pub fn scalar(text: &str, order: f64) -> Result<Self> {
        Self::new(&[text], order, 1.0)
    }

    /// Row-major `r x r` entries in the variables `t`, `q`, `p`, `hbar`.
    pub fn new(entries: &[&str], order: f64, hbar: f64) -> Result<Self> {
        let r = (entries.len() as f64).sqrt().round() as usize;
        if r == 0 || r * r != entries.len() {
            return Err(SymcalcError::InvalidHamiltonian(format!("{} entries do not form a square matrix", entries.len())));
        }
        if !(order.is_finite() && order > 0.0) {
            return Err(SymcalcError::InvalidHamiltonian(format!("order m = {order} must be positive")));
        }
        let mut exprs = Vec::with_capacity(entries.len());
        for text in entries {
            let e = parse_expression(text)?;
            for v in e.variables() {
                if !matches!(v.as_str(), "t" | "q" | "p" | "hbar") {
                    return Err(SymcalcError::InvalidHamiltonian(format!("unknown variable `{v}` in `{text}`")));
                }
            }
            exprs.push(e.substitute("hbar", &Expr::num(hbar)));
        }
        Self::from_exprs(exprs, r, order, hbar)
    }

    pub fn from_exprs(entries: Vec<Expr>, r: usize, order: f64, hbar: f64) -> Result<Self> {
        let mut derivs = Vec::with_capacity(entries.len());
        for e in &entries {
            let mut row = vec![None; alpha_index(0, MAX_DERIV) + 1];
            for (aq, ap) in alphas() {
                let mut d = e.clone();
                for _ in 0..aq {
                    d = d.derivative("q");
                }
                for _ in 0..ap {
                    d = d.derivative("p");
                }
                row[alpha_index(aq, ap)] = Some(d.bind(&["t", "q", "p"])?);
            }
            derivs.push(row.into_iter().map(|b| b.expect("all multi-indices filled")).collect());
        }
        let time_independent = entries.iter().all(|e| !e.depends_on("t"));
        Ok(QuasiHamiltonian { entries, r, order, hbar, derivs, time_independent })
    }

    pub fn fiber(&self) -> usize {
        self.r
    }
    pub fn order(&self) -> f64 {
        self.order
    }
    pub fn hbar(&self) -> f64 {
        self.hbar
    }
    pub fn entries(&self) -> &[Expr] {
        &self.entries
    }
    pub fn is_time_independent(&self) -> bool {
        self.time_independent
    }
    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(Expr::is_zero)
    }

    /// Value of entry `(0, 0)`; the whole value for scalar symbols.
    pub fn value(&self, t: f64, q: f64, p: f64) -> C64 {
        self.derivs[0][0].eval_real(&[t, q, p])
    }

    pub fn value_into(&self, t: f64, q: f64, p: f64, out: &mut [C64]) {
        for (o, d) in out.iter_mut().zip(&self.derivs) {
            *o = d[0].eval_real(&[t, q, p]);
        }
    }

    /// `d^aq/dq^aq d^ap/dp^ap` of entry `(0, 0)`, for `aq + ap <= 3`.
    pub fn partial(&self, aq: usize, ap: usize, t: f64, q: f64, p: f64) -> C64 {
        self.derivs[0][alpha_index(aq, ap)].eval_real(&[t, q, p])
    }

    pub fn partial_into(&self, aq: usize, ap: usize, t: f64, q: f64, p: f64, out: &mut [C64]) {
        let i = alpha_index(aq, ap);
        for (o, d) in out.iter_mut().zip(&self.derivs) {
            *o = d[i].eval_real(&[t, q, p]);
        }
    }

    fn magnitude(&self, aq: usize, ap: usize, t: f64, q: f64, p: f64) -> f64 {
        let i = alpha_index(aq, ap);
        self.derivs.iter().map(|d| d[i].eval_real(&[t, q, p]).norm_sqr()).sum::<f64>().sqrt()
    }

    /// Smallest eigenvalue of the Hermitian part of `i f`; `Re(i f)` for scalars.
    pub fn dissipation(&self, t: f64, q: f64, p: f64) -> f64 {
        let r = self.r;
        let mut v = vec![C64::new(0.0, 0.0); r * r];
        self.value_into(t, q, p, &mut v);
        if r == 1 {
            return (C64::i() * v[0]).re;
        }
        let m = DMatrix::from_row_slice(r, r, &v) * C64::i();
        let h = (&m + m.adjoint()) * C64::new(0.5, 0.0);
        h.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnoseOptions {
    pub max_order: usize,
    pub samples: usize,
    pub seed: u64,
    pub t_range: (f64, f64),
    pub t_samples: usize,
    /// `C(4R) / C(2R)` above this flags growth beyond order `m`.
    pub growth_limit: f64,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        DiagnoseOptions { max_order: 3, samples: 2000, seed: 0, t_range: (0.0, 1.0), t_samples: 5, growth_limit: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiIndexBound {
    pub alpha: (usize, usize),
    /// Sampled constants on boxes scaled by 1, 2 and 4.
    pub constants: [f64; 3],
    pub diverging: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticReport {
    pub order: f64,
    pub radii: [(f64, f64); 3],
    pub bounds: Vec<MultiIndexBound>,
    pub delta: f64,
    pub quasi_polynomial: bool,
    pub t_continuous: bool,
    /// Samples `(t, q, p)` where some derivative evaluated non-finite.
    pub non_finite: Vec<(f64, f64, f64)>,
    /// Largest relative mismatch between symbolic first derivatives and
    /// centred differences with step `1e-4`.
    pub derivative_mismatch: f64,
    pub seed: u64,
}

/// Sample `f` on boxes `s * [-Rq, Rq] x [-Rp, Rp]`, `s = 1, 2, 4`, where the
/// base box is the grid's phase-space extent.
pub fn diagnose(f: &QuasiHamiltonian, grid: &PhaseGrid, opts: &DiagnoseOptions) -> DiagnosticReport {
    let rq = grid.q_min().abs().max(grid.q_max().abs());
    let rp = grid.p_max();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (t0, t1) = opts.t_range;
    let ts: Vec<f64> = if f.is_time_independent() || opts.t_samples <= 1 {
        vec![t0]
    } else {
        (0..opts.t_samples).map(|i| t0 + (t1 - t0) * i as f64 / (opts.t_samples - 1) as f64).collect()
    };
    let orders: Vec<(usize, usize)> = alphas().filter(|(a, b)| a + b <= opts.max_order.min(MAX_DERIV)).collect();
    let mut consts = vec![[0.0f64; 3]; orders.len()];
    let mut non_finite = Vec::new();
    let mut delta = f64::INFINITY;
    let mut base_samples = Vec::new();
    for (si, scale) in [1.0, 2.0, 4.0].into_iter().enumerate() {
        for _ in 0..opts.samples {
            let q = scale * rq * rng.gen_range(-1.0..=1.0);
            let p = scale * rp * rng.gen_range(-1.0..=1.0);
            if si == 0 {
                base_samples.push((q, p));
            }
            let w = 1.0 + (q * q + p * p).sqrt();
            for &t in &ts {
                for (c, &(aq, ap)) in consts.iter_mut().zip(&orders) {
                    let m = f.magnitude(aq, ap, t, q, p);
                    if !m.is_finite() {
                        if non_finite.last() != Some(&(t, q, p)) {
                            non_finite.push((t, q, p));
                        }
                        c[si] = f64::INFINITY;
                        continue;
                    }
                    c[si] = c[si].max(m * w.powf((aq + ap) as f64 - f.order()));
                }
                if si == 0 {
                    let d = f.dissipation(t, q, p);
                    if d.is_finite() {
                        delta = delta.min(d);
                    }
                }
            }
        }
    }
    // the constants are sups over nested boxes
    for c in consts.iter_mut() {
        c[1] = c[1].max(c[0]);
        c[2] = c[2].max(c[1]);
    }
    let bounds: Vec<MultiIndexBound> = orders
        .iter()
        .zip(&consts)
        .map(|(&alpha, c)| {
            let diverging = !c[2].is_finite() || (c[2] > 0.0 && c[2] > opts.growth_limit * c[1].max(f64::MIN_POSITIVE));
            MultiIndexBound { alpha, constants: *c, diverging }
        })
        .collect();
    let quasi_polynomial = bounds.iter().all(|b| !b.diverging);
    let mismatch = derivative_mismatch(f, &ts, &base_samples);
    let t_continuous = time_continuity(f, opts.t_range, &base_samples);
    DiagnosticReport {
        order: f.order(),
        radii: [(rq, rp), (2.0 * rq, 2.0 * rp), (4.0 * rq, 4.0 * rp)],
        bounds,
        delta: if delta.is_finite() { delta } else { 0.0 },
        quasi_polynomial,
        t_continuous,
        non_finite,
        derivative_mismatch: mismatch,
        seed: opts.seed,
    }
}

fn derivative_mismatch(f: &QuasiHamiltonian, ts: &[f64], samples: &[(f64, f64)]) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for &(q, p) in samples.iter().take(64) {
        for &t in ts {
            for (aq, ap) in [(1, 0), (0, 1)] {
                let sym = f.partial(aq, ap, t, q, p);
                let fd = if aq == 1 {
                    (f.value(t, q + h, p) - f.value(t, q - h, p)) / (2.0 * h)
                } else {
                    (f.value(t, q, p + h) - f.value(t, q, p - h)) / (2.0 * h)
                };
                let err = (sym - fd).norm() / (1.0 + sym.norm());
                if err.is_finite() {
                    worst = worst.max(err);
                }
            }
        }
    }
    worst
}

/// Differences over shrinking time steps must shrink.
fn time_continuity(f: &QuasiHamiltonian, (t0, t1): (f64, f64), samples: &[(f64, f64)]) -> bool {
    if f.is_time_independent() {
        return true;
    }
    let steps = [1e-3, 1e-5, 1e-7];
    for i in 0..5 {
        let t = t0 + (t1 - t0) * i as f64 / 4.0;
        for &(q, p) in samples.iter().take(16) {
            let base = f.value(t, q, p);
            if !base.norm().is_finite() {
                continue;
            }
            let d: Vec<f64> = steps.iter().map(|h| (f.value(t + h, q, p) - base).norm()).collect();
            let floor = 1e-12 * (1.0 + base.norm());
            if d[2] > floor && d[2] > 0.1 * d[0] {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> PhaseGrid {
        PhaseGrid::new(-8.0, 8.0, 32, 1.0).unwrap()
    }

    fn opts() -> DiagnoseOptions {
        DiagnoseOptions { samples: 400, ..Default::default() }
    }

    #[test]
    fn kinetic_energy_is_quasi_polynomial_of_order_two() {
        let f = QuasiHamiltonian::scalar("p^2/2", 2.0).unwrap();
        let r = diagnose(&f, &grid(), &opts());
        assert!(r.quasi_polynomial);
        assert_eq!(r.delta, 0.0);
        assert!(r.bounds.iter().all(|b| b.constants.iter().all(|c| c.is_finite())));
        let c02 = r.bounds.iter().find(|b| b.alpha == (0, 2)).unwrap();
        assert!((c02.constants[0] - 1.0).abs() < 1e-12);
        assert!(r.derivative_mismatch < 1e-6);
    }

    #[test]
    fn zero_symbol_has_zero_constants() {
        let f = QuasiHamiltonian::scalar("0", 1.0).unwrap();
        let r = diagnose(&f, &grid(), &opts());
        assert!(r.bounds.iter().all(|b| b.constants == [0.0; 3]));
        assert_eq!(r.delta, 0.0);
        assert!(r.quasi_polynomial);
    }

    #[test]
    fn gaussian_growth_diverges() {
        let f = QuasiHamiltonian::scalar("exp(q^2)", 2.0).unwrap();
        let r = diagnose(&f, &grid(), &opts());
        assert!(!r.quasi_polynomial);
        assert!(r.bounds.iter().any(|b| b.diverging));
    }

    #[test]
    fn cubic_exceeds_order_two() {
        let f = QuasiHamiltonian::scalar("p^3", 2.0).unwrap();
        assert!(!diagnose(&f, &grid(), &opts()).quasi_polynomial);
        let f = QuasiHamiltonian::scalar("p^3", 3.0).unwrap();
        assert!(diagnose(&f, &grid(), &opts()).quasi_polynomial);
    }

    #[test]
    fn absorbing_potential_has_positive_delta() {
        let f = QuasiHamiltonian::scalar("p^2/2 - i*(1 + q^2)", 2.0).unwrap();
        let r = diagnose(&f, &grid(), &opts());
        assert!((r.delta - 1.0).abs() < 0.05);
    }

    #[test]
    fn reports_are_reproducible() {
        let f = QuasiHamiltonian::scalar("cos(t)*q^2 + p^2", 2.0).unwrap();
        let a = diagnose(&f, &grid(), &opts());
        let b = diagnose(&f, &grid(), &opts());
        assert_eq!(a, b);
        assert!(a.t_continuous);
        let other = diagnose(&f, &grid(), &DiagnoseOptions { seed: 9, ..opts() });
        assert_ne!(a.bounds, other.bounds);
    }

    #[test]
    fn matrix_dissipation_uses_hermitian_part() {
        let f = QuasiHamiltonian::new(&["p^2", "0", "0", "-2*i"], 2.0, 1.0).unwrap();
        assert_eq!(f.fiber(), 2);
        assert!((f.dissipation(0.0, 0.3, 0.1) - 0.0).abs() < 1e-12);
        let g = QuasiHamiltonian::new(&["-i", "0", "0", "-2*i"], 2.0, 1.0).unwrap();
        assert!((g.dissipation(0.0, 0.3, 0.1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(QuasiHamiltonian::scalar("x + p", 2.0).is_err());
        assert!(QuasiHamiltonian::new(&["p", "q"], 2.0, 1.0).is_err());
        assert!(QuasiHamiltonian::scalar("p", 0.0).is_err());
    }
}
