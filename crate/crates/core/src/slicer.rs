//! Ordered products of resolvent time slices and their refinement limits.
//!
//! A slice over `(t_{n-1}, t_n]` is the operator whose Weyl symbol is the
//! pointwise (matrix) inverse `[1 + (i/hbar) f(t_n, q, p) dt_n]^{-1}`. The
//! product `U_N ... U_1` is applied with the earliest slice acting first.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::numeric::{fitted_slope, weighted_norm, FftPair};
use crate::symcalc::{
    weyl_quantize_fn, OmegaRule, OperatorKernel, PhaseGrid, QuasiHamiltonian, SymbolField, SymcalcError, C64,
};

/// Determinant floor for slice inversion.
pub const SINGULAR_TOL: f64 = 1e-12;
/// Norm growth that aborts a propagation.
pub const GROWTH_LIMIT: f64 = 10.0;
/// Errors below this are treated as converged in monotonicity checks.
pub const NOISE_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SlicerError {
    #[error(transparent)]
    Symcalc(#[from] SymcalcError),
    #[error("singular slice at t = {t}, q = {q}, p = {p}: |det(1 + i f dt / hbar)| = {det:e}")]
    SingularSlice { t: f64, q: f64, p: f64, det: f64 },
    #[error("unstable propagation: norm grew by {growth:e} at step {step}")]
    Instability { step: usize, growth: f64 },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("quantized Hamiltonian is not Hermitian (skew {skew:e})")]
    NonHermitian { skew: f64 },
    #[error("spectral oracle needs a time-independent Hamiltonian")]
    TimeDependent,
}

pub type Result<T> = std::result::Result<T, SlicerError>;

/// Ordered times `t_0 < t_1 < ... < t_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    times: Vec<f64>,
}

impl Partition {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(SlicerError::InvalidPartition("need at least two times".into()));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(SlicerError::InvalidPartition("times must be finite".into()));
        }
        if let Some(w) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(SlicerError::InvalidPartition(format!("times not increasing at index {}", w + 1)));
        }
        Ok(Partition { times })
    }

    pub fn uniform(t0: f64, t1: f64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(SlicerError::InvalidPartition("N must be at least 1".into()));
        }
        let dt = (t1 - t0) / n as f64;
        let mut times: Vec<f64> = (0..n).map(|i| t0 + i as f64 * dt).collect();
        times.push(t1);
        Self::new(times)
    }

    /// Number of slices.
    pub fn len(&self) -> usize {
        self.times.len() - 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn start(&self) -> f64 {
        self.times[0]
    }
    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }
    pub fn mesh(&self) -> f64 {
        self.times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// `(t_n, dt_n)` for `n = 1..=N`.
    pub fn slices(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.windows(2).map(|w| (w[1], w[1] - w[0]))
    }

    /// Midpoint refinement.
    pub fn refined(&self) -> Partition {
        let mut times = Vec::with_capacity(2 * self.times.len() - 1);
        for w in self.times.windows(2) {
            times.push(w[0]);
            times.push(0.5 * (w[0] + w[1]));
        }
        times.push(self.end());
        Partition { times }
    }

    pub fn refines(&self, coarser: &Partition) -> bool {
        coarser.times.iter().all(|t| self.times.iter().any(|s| (s - t).abs() <= 1e-12 * (1.0 + t.abs())))
    }
}

/// Wave function on the position grid, `r` components per point.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    grid: PhaseGrid,
    r: usize,
    values: Vec<C64>,
}

impl StateVector {
    pub fn new(grid: PhaseGrid, r: usize, values: Vec<C64>) -> Result<Self> {
        if r == 0 || values.len() != grid.n() * r {
            return Err(SlicerError::Shape(format!("{} values for n = {}, r = {r}", values.len(), grid.n())));
        }
        Ok(StateVector { grid, r, values })
    }

    pub fn from_fn(grid: PhaseGrid, f: impl Fn(f64) -> C64) -> Self {
        StateVector { grid, r: 1, values: grid.positions().into_iter().map(f).collect() }
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }
    pub fn fiber(&self) -> usize {
        self.r
    }
    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        weighted_norm(&self.values, self.grid.dq())
    }

    /// `<self, other>` with weight `dq`.
    pub fn inner(&self, other: &StateVector) -> C64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a.conj() * b).sum::<C64>() * self.grid.dq()
    }

    pub fn distance(&self, other: &StateVector) -> f64 {
        let d: Vec<C64> = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        weighted_norm(&d, self.grid.dq())
    }

    pub fn scaled(&self, s: C64) -> StateVector {
        StateVector { values: self.values.iter().map(|v| v * s).collect(), ..self.clone() }
    }

    pub fn normalized(&self) -> StateVector {
        self.scaled(C64::new(1.0 / self.norm(), 0.0))
    }

    pub fn apply(&self, k: &OperatorKernel) -> StateVector {
        StateVector { values: k.apply(&self.values), ..self.clone() }
    }
}

/// Pointwise inverse of `1 + (i dt / hbar) F` for an `r x r` value `F`,
/// written to `out`; returns `|det|` of the matrix being inverted.
fn invert_slice(fv: &[C64], r: usize, dt: f64, hbar: f64, out: &mut [C64]) -> f64 {
    let s = C64::new(0.0, dt / hbar);
    if r == 1 {
        let m = C64::new(1.0, 0.0) + s * fv[0];
        out[0] = m.inv();
        return m.norm();
    }
    let mut m = DMatrix::from_row_slice(r, r, fv) * s;
    for i in 0..r {
        m[(i, i)] += 1.0;
    }
    let det = m.determinant().norm();
    if let Some(inv) = m.try_inverse() {
        for a in 0..r {
            for b in 0..r {
                out[a * r + b] = inv[(a, b)];
            }
        }
    }
    det
}

/// Weyl symbol of the slice at `t_n` on the grid.
pub fn slice_symbol(f: &QuasiHamiltonian, t_n: f64, dt: f64, grid: &PhaseGrid) -> Result<SymbolField> {
    check_step(dt)?;
    let r = f.fiber();
    let hbar = grid.hbar();
    let mut fv = vec![C64::new(0.0, 0.0); r * r];
    let mut err = None;
    let field = SymbolField::from_fn_matrix(*grid, OmegaRule::Weyl, r, |q, p, out| {
        f.value_into(t_n, q, p, &mut fv);
        let det = invert_slice(&fv, r, dt, hbar, out);
        if det < SINGULAR_TOL && err.is_none() {
            err = Some(SlicerError::SingularSlice { t: t_n, q, p, det });
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(field),
    }
}

fn check_step(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SlicerError::InvalidPartition(format!("slice length {dt} must be positive")));
    }
    Ok(())
}

/// Slice operator, quantized from the exact symbol at the half-step
/// midpoints.
pub fn slice_kernel(f: &QuasiHamiltonian, t_n: f64, dt: f64, grid: &PhaseGrid) -> Result<OperatorKernel> {
    check_step(dt)?;
    let r = f.fiber();
    let hbar = grid.hbar();
    let err = Mutex::new(None);
    let k = weyl_quantize_fn(*grid, r, |q, p, out| {
        let mut fv = [C64::new(0.0, 0.0); 16];
        let mut heap;
        let fv: &mut [C64] = if r * r <= 16 {
            &mut fv[..r * r]
        } else {
            heap = vec![C64::new(0.0, 0.0); r * r];
            &mut heap
        };
        f.value_into(t_n, q, p, fv);
        let det = invert_slice(fv, r, dt, hbar, out);
        if det < SINGULAR_TOL {
            let mut e = err.lock().expect("slice error lock");
            if e.is_none() {
                *e = Some(SlicerError::SingularSlice { t: t_n, q, p, det });
            }
        }
    });
    match err.into_inner().expect("slice error lock") {
        Some(e) => Err(e),
        None => Ok(k),
    }
}

/// Slices keyed by `(t_n, dt_n)`; time-independent symbols share slices of
/// equal length.
pub struct SliceCache<'a> {
    f: &'a QuasiHamiltonian,
    grid: PhaseGrid,
    kernels: HashMap<(u64, u64), OperatorKernel>,
}

impl<'a> SliceCache<'a> {
    pub fn new(f: &'a QuasiHamiltonian, grid: PhaseGrid) -> Self {
        SliceCache { f, grid, kernels: HashMap::new() }
    }

    pub fn get(&mut self, t_n: f64, dt: f64) -> Result<&OperatorKernel> {
        let tkey = if self.f.is_time_independent() { 0 } else { t_n.to_bits() };
        let key = (tkey, dt.to_bits());
        if !self.kernels.contains_key(&key) {
            let k = slice_kernel(self.f, t_n, dt, &self.grid)?;
            self.kernels.insert(key, k);
        }
        Ok(&self.kernels[&key])
    }
}

/// `psi_P = U_N (... (U_1 psi_0))`.
pub fn apply_partition(f: &QuasiHamiltonian, part: &Partition, psi0: &StateVector) -> Result<StateVector> {
    let mut cache = SliceCache::new(f, *psi0.grid());
    apply_partition_cached(&mut cache, part, psi0)
}

pub fn apply_partition_cached(cache: &mut SliceCache, part: &Partition, psi0: &StateVector) -> Result<StateVector> {
    if psi0.fiber() != cache.f.fiber() || psi0.grid() != &cache.grid {
        return Err(SlicerError::Shape("state and Hamiltonian disagree on grid or fiber".into()));
    }
    if cache.f.is_zero() {
        return Ok(psi0.clone());
    }
    let n0 = psi0.norm();
    let mut psi = psi0.clone();
    for (step, (t, dt)) in part.slices().enumerate() {
        psi = psi.apply(cache.get(t, dt)?);
        let growth = psi.norm() / n0;
        if !(growth <= GROWTH_LIMIT) {
            return Err(SlicerError::Instability { step: step + 1, growth });
        }
    }
    Ok(psi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub slices: usize,
    pub mesh: f64,
    pub error: f64,
    pub norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    Oracle,
    /// Differences between consecutive partitions.
    Cauchy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub reference: Reference,
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `log error` against `log mesh`, over rows
    /// above the noise floor.
    pub order: Option<f64>,
    /// Row indices where the error grew beyond the noise floor.
    pub non_monotone: Vec<usize>,
}

impl ConvergenceTable {
    pub fn is_monotone(&self) -> bool {
        self.non_monotone.is_empty()
    }

    pub fn final_error(&self) -> Option<f64> {
        self.rows.last().map(|r| r.error)
    }
}

/// Propagate `psi0` over each partition of a refining schedule and measure
/// the error against `oracle`, or the Cauchy differences without one.
pub fn convergence_study(
    f: &QuasiHamiltonian,
    schedule: &[Partition],
    psi0: &StateVector,
    oracle: Option<&StateVector>,
) -> Result<ConvergenceTable> {
    if schedule.is_empty() {
        return Err(SlicerError::InvalidPartition("empty schedule".into()));
    }
    for w in schedule.windows(2) {
        if w[1].len() <= w[0].len() || !w[1].refines(&w[0]) {
            return Err(SlicerError::InvalidPartition("schedule is not strictly refining".into()));
        }
    }
    let runs: Vec<Result<(StateVector, f64)>> = schedule
        .par_iter()
        .map(|part| {
            let start = Instant::now();
            let psi = apply_partition(f, part, psi0)?;
            Ok((psi, start.elapsed().as_secs_f64()))
        })
        .collect();
    let runs: Vec<(StateVector, f64)> = runs.into_iter().collect::<Result<_>>()?;
    let reference = if oracle.is_some() { Reference::Oracle } else { Reference::Cauchy };
    let mut rows = Vec::new();
    for (i, (part, (psi, secs))) in schedule.iter().zip(&runs).enumerate() {
        let error = match oracle {
            Some(o) => psi.distance(o),
            None if i + 1 < runs.len() => runs[i + 1].0.distance(psi),
            None => continue,
        };
        rows.push(ConvergenceRow { slices: part.len(), mesh: part.mesh(), error, norm: psi.norm(), seconds: *secs });
    }
    let non_monotone = rows
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].error > w[0].error && w[1].error > NOISE_FLOOR)
        .map(|(i, _)| i + 1)
        .collect();
    let fit: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.error > NOISE_FLOOR).collect();
    let x: Vec<f64> = fit.iter().map(|r| r.mesh.ln()).collect();
    let y: Vec<f64> = fit.iter().map(|r| r.error.ln()).collect();
    Ok(ConvergenceTable { reference, order: fitted_slope(&x, &y), rows, non_monotone })
}

/// `exp(-(i/hbar) H T)` of the quantized time-independent Hamiltonian, by
/// eigendecomposition.
pub fn spectral_oracle(f: &QuasiHamiltonian, grid: &PhaseGrid, duration: f64) -> Result<OperatorKernel> {
    let (values, vectors) = hamiltonian_eigensystem(f, grid)?;
    let hbar = grid.hbar();
    let phases = DVector::from_iterator(values.len(), values.iter().map(|l| C64::from_polar(1.0, -l * duration / hbar)));
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |i, j| vectors[(i, j)] * phases[j]);
    let u = scaled * vectors.adjoint();
    Ok(OperatorKernel::from_operator(*grid, f.fiber(), u)?)
}

/// Eigenvalues (ascending) and eigenvectors of the Hermitian matrix of the
/// Weyl-quantized Hamiltonian.
pub fn hamiltonian_eigensystem(f: &QuasiHamiltonian, grid: &PhaseGrid) -> Result<(Vec<f64>, DMatrix<C64>)> {
    if !f.is_time_independent() {
        return Err(SlicerError::TimeDependent);
    }
    let r = f.fiber();
    let k = weyl_quantize_fn(*grid, r, |q, p, out| f.value_into(0.0, q, p, out));
    let h = k.operator();
    let scale = h.iter().map(|v| v.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let skew = (&h - h.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max) / scale;
    if skew > 1e-8 {
        return Err(SlicerError::NonHermitian { skew });
    }
    let herm = (&h + h.adjoint()) * C64::new(0.5, 0.0);
    let eig = herm.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |i, j| eig.eigenvectors[(i, order[j])]);
    Ok((values, vectors))
}

/// Free evolution under `p^2 / 2` by the exact Fourier propagator on the
/// grid's momentum lattice.
pub fn free_particle_oracle(psi0: &StateVector, duration: f64) -> StateVector {
    let g = *psi0.grid();
    let n = g.n();
    let plan = FftPair::new(n);
    let mut v = psi0.values().to_vec();
    plan.forward.process(&mut v);
    for (m, x) in v.iter_mut().enumerate() {
        // same momentum lattice as the grid's p values
        let k = if m < n / 2 { m as f64 } else { m as f64 - n as f64 };
        let p = k * g.dp();
        *x *= C64::from_polar(1.0 / n as f64, -p * p * duration / (2.0 * g.hbar()));
    }
    plan.inverse.process(&mut v);
    StateVector { grid: g, r: 1, values: v }
}

/// Gaussian packet `exp(-(q - q0)^2 / (2 w^2) + i k q)`.
pub fn gaussian_packet(grid: PhaseGrid, q0: f64, width: f64, k: f64) -> StateVector {
    StateVector::from_fn(grid, |q| C64::from_polar((-(q - q0).powi(2) / (2.0 * width * width)).exp(), k * q))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> PhaseGrid {
        PhaseGrid::new(-10.0, 10.0, 128, 1.0).unwrap()
    }

    fn packet() -> StateVector {
        gaussian_packet(grid(), 1.0, 1.0, 0.5)
    }

    #[test]
    fn partitions_validate_and_refine() {
        assert!(Partition::new(vec![0.0]).is_err());
        assert!(Partition::new(vec![0.0, 1.0, 1.0]).is_err());
        let p = Partition::uniform(0.0, 1.0, 4).unwrap();
        assert_eq!(p.len(), 4);
        assert!((p.mesh() - 0.25).abs() < 1e-15);
        let r = p.refined();
        assert_eq!(r.len(), 8);
        assert!(r.refines(&p));
        assert!(!p.refines(&r));
        let slices: Vec<(f64, f64)> = p.slices().collect();
        assert_eq!(slices[0], (0.25, 0.25));
    }

    #[test]
    fn slice_symbols() {
        let g = grid();
        let zero = QuasiHamiltonian::scalar("0", 1.0).unwrap();
        let s = slice_symbol(&zero, 0.1, 0.1, &g).unwrap();
        assert!(s.values().iter().all(|v| *v == C64::new(1.0, 0.0)));
        let e = QuasiHamiltonian::scalar("2.5", 1.0).unwrap();
        let s = slice_symbol(&e, 0.1, 0.1, &g).unwrap();
        assert!((s.at(3, 7) - C64::new(1.0, 0.25).inv()).norm() < 1e-15);
        let d = QuasiHamiltonian::new(&["1", "0", "0", "2"], 1.0, 1.0).unwrap();
        let s = slice_symbol(&d, 0.0, 0.1, &g).unwrap();
        assert!((s.entry(5, 5, 0, 0) - C64::new(1.0, 0.1).inv()).norm() < 1e-15);
        assert!((s.entry(5, 5, 1, 1) - C64::new(1.0, 0.2).inv()).norm() < 1e-15);
        assert_eq!(s.entry(5, 5, 0, 1), C64::new(0.0, 0.0));
        let h = QuasiHamiltonian::scalar("p^2/2 + q^2/2", 2.0).unwrap();
        assert!(slice_symbol(&h, 0.0, 0.3, &g).unwrap().max_abs() <= 1.0);
    }

    #[test]
    fn singular_slices_are_reported() {
        let g = grid();
        let f = QuasiHamiltonian::scalar("i*10", 1.0).unwrap();
        match slice_symbol(&f, 0.0, 0.1, &g) {
            Err(SlicerError::SingularSlice { det, .. }) => assert!(det < 1e-12),
            other => panic!("{other:?}"),
        }
        assert!(matches!(slice_kernel(&f, 0.0, 0.1, &g), Err(SlicerError::SingularSlice { .. })));
    }

    #[test]
    fn constant_energy_is_a_scalar_recursion() {
        let f = QuasiHamiltonian::scalar("0.7", 1.0).unwrap();
        let psi0 = packet();
        let part = Partition::uniform(0.0, 1.0, 8).unwrap();
        let psi = apply_partition(&f, &part, &psi0).unwrap();
        let factor = C64::new(1.0, 0.7 / 8.0).powi(-8);
        assert!(psi.distance(&psi0.scaled(factor)) < 1e-12);
        let zero = QuasiHamiltonian::scalar("0", 1.0).unwrap();
        assert_eq!(apply_partition(&zero, &part, &psi0).unwrap(), psi0);
    }

    #[test]
    fn semigroup_consistency() {
        let f = QuasiHamiltonian::scalar("p^2/2 + q^2/2", 2.0).unwrap();
        let psi0 = packet();
        let half = Partition::uniform(0.0, 0.5, 8).unwrap();
        let whole = Partition::uniform(0.0, 1.0, 16).unwrap();
        let twice = apply_partition(&f, &half, &apply_partition(&f, &half, &psi0).unwrap()).unwrap();
        let once = apply_partition(&f, &whole, &psi0).unwrap();
        assert!(twice.distance(&once) <= 1e-12);
    }

    #[test]
    fn oscillator_spectrum() {
        let f = QuasiHamiltonian::scalar("p^2/2 + q^2/2", 2.0).unwrap();
        let (vals, _) = hamiltonian_eigensystem(&f, &grid()).unwrap();
        for (n, v) in vals.iter().take(6).enumerate() {
            assert!((v - (n as f64 + 0.5)).abs() / (n as f64 + 0.5) < 1e-6, "{n}: {v}");
        }
    }

    #[test]
    fn oracles_agree_on_free_motion() {
        let g = grid();
        let f = QuasiHamiltonian::scalar("p^2/2", 2.0).unwrap();
        let psi0 = packet();
        let u = spectral_oracle(&f, &g, 1.0).unwrap();
        let a = psi0.apply(&u);
        let b = free_particle_oracle(&psi0, 1.0);
        assert!(a.distance(&b) < 1e-10);
        let unitary = u.operator().adjoint() * u.operator();
        let dev = (unitary - DMatrix::<C64>::identity(128, 128)).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(dev < 1e-10);
        let zero = QuasiHamiltonian::scalar("0", 1.0).unwrap();
        let id = spectral_oracle(&zero, &g, 1.0).unwrap();
        assert!((id.matrix() - OperatorKernel::identity(g, 1).matrix()).iter().all(|v| v.norm() < 1e-10));
    }

    #[test]
    fn oscillator_period_returns_ground_state() {
        let g = grid();
        let f = QuasiHamiltonian::scalar("p^2/2 + q^2/2", 2.0).unwrap();
        let phi0 = gaussian_packet(g, 0.0, 1.0, 0.0).normalized();
        let t = 2.0 * std::f64::consts::PI;
        let target = phi0.scaled(C64::from_polar(1.0, -t / 2.0));
        let mut prev = 0.0;
        for n in [64, 128, 256] {
            let psi = apply_partition(&f, &Partition::uniform(0.0, t, n).unwrap(), &phi0).unwrap();
            let fid = target.inner(&psi).norm();
            assert!(fid > prev);
            prev = fid;
        }
        assert!(prev > 0.9);
    }

    #[test]
    fn first_order_convergence_for_free_particle() {
        let f = QuasiHamiltonian::scalar("p^2/2", 2.0).unwrap();
        let psi0 = packet();
        let oracle = free_particle_oracle(&psi0, 1.0);
        let schedule: Vec<Partition> = (4..=8).map(|k| Partition::uniform(0.0, 1.0, 1 << k).unwrap()).collect();
        let table = convergence_study(&f, &schedule, &psi0, Some(&oracle)).unwrap();
        assert!(table.is_monotone());
        let order = table.order.unwrap();
        assert!((order - 1.0).abs() < 0.2, "{order}");
        let cauchy = convergence_study(&f, &schedule, &psi0, None).unwrap();
        assert_eq!(cauchy.rows.len(), schedule.len() - 1);
        assert!((cauchy.order.unwrap() - 1.0).abs() < 0.2);
    }

    #[test]
    fn non_refining_schedules_are_rejected() {
        let f = QuasiHamiltonian::scalar("p^2/2", 2.0).unwrap();
        let schedule = vec![Partition::uniform(0.0, 1.0, 4).unwrap(), Partition::uniform(0.0, 1.0, 6).unwrap()];
        assert!(convergence_study(&f, &schedule, &packet(), None).is_err());
    }
}
