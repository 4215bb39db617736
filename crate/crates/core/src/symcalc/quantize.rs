//! Weyl and standard quantization on the periodic grid.
//!
//! A Weyl kernel entry `K(j'', j')` is the momentum sum of the symbol at the
//! midpoint of the pair. On the periodic lattice each ordered pair has a
//! separation `s` in `[-n/2, n/2)` and a midpoint on the half-step lattice
//! `c = 2 j' + s (mod 2n)`; this pairing is a bijection, which makes the
//! discrete quantization exactly invertible once the symbol is known at
//! half-step positions.

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{OmegaRule, OperatorKernel, PhaseGrid, Result, SymbolField, SymcalcError, C64, EDGE_TOL};
use crate::numeric::{spectral_half_shift, FftPair, ShiftStencil};

/// How a symbol given on grid points is carried to half-step positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfPoint {
    /// Fourier shift; exact for fields decaying at the grid edges.
    Spectral,
    /// Local 16-point Lagrange interpolation; exact on polynomials up to
    /// degree 15, suited to fields that grow towards the edges.
    Local,
}

const LOCAL_WIDTH: usize = 16;

fn fft_index(kk: usize, n: usize) -> usize {
    (kk + n / 2) % n
}

fn require_rule(a: &SymbolField, rule: OmegaRule) -> Result<()> {
    if !a.rule().equivalent(&rule) {
        return Err(SymcalcError::RuleMismatch { expected: rule.name(), found: a.rule().name() });
    }
    Ok(())
}

/// Weyl quantization with the decay precondition enforced.
pub fn weyl_quantize(a: &SymbolField) -> Result<OperatorKernel> {
    require_rule(a, OmegaRule::Weyl)?;
    let (eq, ep) = a.edge_magnitude();
    if eq.max(ep) > EDGE_TOL {
        return Err(SymcalcError::GridTooSmall { edge: eq.max(ep) });
    }
    weyl_quantize_with(a, HalfPoint::Spectral)
}

/// Weyl quantization with periodic-grid semantics and no decay check.
pub fn weyl_quantize_with(a: &SymbolField, half: HalfPoint) -> Result<OperatorKernel> {
    require_rule(a, OmegaRule::Weyl)?;
    let h = halfpoints_from_grid(a, half);
    Ok(kernel_from_halfpoints(*a.grid(), a.fiber(), &h))
}

/// Weyl quantization of an analytic matrix symbol, evaluated directly at
/// the half-step midpoints.
pub fn weyl_quantize_fn(grid: PhaseGrid, r: usize, f: impl Fn(f64, f64, &mut [C64]) + Sync) -> OperatorKernel {
    let n = grid.n();
    let rr = r * r;
    let mut h = vec![C64::new(0.0, 0.0); 2 * n * n * rr];
    h.par_chunks_mut(n * rr).enumerate().for_each(|(c, row)| {
        let q = grid.q_half(c);
        for kk in 0..n {
            f(q, grid.p(kk), &mut row[kk * rr..(kk + 1) * rr]);
        }
    });
    kernel_from_halfpoints(grid, r, &h)
}

pub fn weyl_quantize_scalar_fn(grid: PhaseGrid, f: impl Fn(f64, f64) -> C64 + Sync) -> OperatorKernel {
    weyl_quantize_fn(grid, 1, |q, p, out| out[0] = f(q, p))
}

fn halfpoints_from_grid(a: &SymbolField, half: HalfPoint) -> Vec<C64> {
    let grid = a.grid();
    let n = grid.n();
    let r = a.fiber();
    let rr = r * r;
    let vals = a.values();
    let mut h = vec![C64::new(0.0, 0.0); 2 * n * n * rr];
    for j in 0..n {
        let src = &vals[j * n * rr..(j + 1) * n * rr];
        h[2 * j * n * rr..(2 * j + 1) * n * rr].copy_from_slice(src);
    }
    let plan = FftPair::new(n);
    let stencil = (half == HalfPoint::Local).then(|| ShiftStencil::new(n, 0.5, LOCAL_WIDTH));
    let shifted: Vec<Vec<C64>> = (0..n * rr)
        .into_par_iter()
        .map(|col| {
            let (kk, e) = (col / rr, col % rr);
            let column: Vec<C64> = (0..n).map(|j| vals[(j * n + kk) * rr + e]).collect();
            match &stencil {
                Some(st) => {
                    let mut out = vec![C64::new(0.0, 0.0); n];
                    st.apply(&column, &mut out);
                    out
                }
                None => {
                    let mut out = column;
                    spectral_half_shift(&plan, &mut out, 1.0);
                    out
                }
            }
        })
        .collect();
    for (col, column) in shifted.iter().enumerate() {
        let (kk, e) = (col / rr, col % rr);
        for (j, v) in column.iter().enumerate() {
            h[((2 * j + 1) * n + kk) * rr + e] = *v;
        }
    }
    h
}

/// Pair indices `(j'', j')` for half-step midpoint `c` and separation `s`.
fn pair(c: usize, s: i64, n: usize) -> (usize, usize) {
    let jp = ((c as i64 - s).rem_euclid(2 * n as i64) / 2) as usize;
    let jpp = (jp as i64 + s).rem_euclid(n as i64) as usize;
    (jpp, jp)
}

fn kernel_from_halfpoints(grid: PhaseGrid, r: usize, h: &[C64]) -> OperatorKernel {
    let n = grid.n();
    let rr = r * r;
    let inv_l = 1.0 / grid.extent();
    let plan = FftPair::new(n);
    let entries: Vec<Vec<(usize, usize, C64)>> = (0..2 * n)
        .into_par_iter()
        .map(|c| {
            let par = (c % 2) as i64;
            let mut buf = vec![C64::new(0.0, 0.0); n];
            let mut out = Vec::with_capacity(n / 2 * rr);
            for e in 0..rr {
                for kk in 0..n {
                    buf[fft_index(kk, n)] = h[(c * n + kk) * rr + e];
                }
                plan.inverse.process(&mut buf);
                for u in 0..(n / 2) as i64 {
                    let s = -(n as i64) / 2 + 2 * u + par;
                    let (jpp, jp) = pair(c, s, n);
                    let v = buf[s.rem_euclid(n as i64) as usize] * inv_l;
                    out.push((jpp * r + e / r, jp * r + e % r, v));
                }
            }
            out
        })
        .collect();
    let mut m = DMatrix::zeros(n * r, n * r);
    for block in entries {
        for (i, j, v) in block {
            m[(i, j)] = v;
        }
    }
    OperatorKernel::new(grid, r, m).expect("shape is consistent by construction")
}

/// Weyl symbol of a kernel; the half-step treatment is chosen from the
/// kernel's edge decay.
pub fn weyl_dequantize(k: &OperatorKernel) -> SymbolField {
    let half = if k.edge_magnitude() <= EDGE_TOL { HalfPoint::Spectral } else { HalfPoint::Local };
    weyl_dequantize_with(k, half)
}

pub fn weyl_dequantize_with(k: &OperatorKernel, half: HalfPoint) -> SymbolField {
    let grid = *k.grid();
    let n = grid.n();
    let r = k.fiber();
    let rr = r * r;
    let hn = n / 2;
    let mat = k.matrix();
    let scale = grid.extent() / hn as f64;
    let plan_h = FftPair::new(hn);
    // b[c][k0][e] = a(c, k0) + (-1)^c a(c, k0 + n/2), FFT ordering in k
    let b: Vec<Vec<C64>> = (0..2 * n)
        .into_par_iter()
        .map(|c| {
            let par = (c % 2) as i64;
            let mut out = vec![C64::new(0.0, 0.0); hn * rr];
            let mut buf = vec![C64::new(0.0, 0.0); hn];
            for e in 0..rr {
                for (ui, slot) in buf.iter_mut().enumerate() {
                    let u = if ui < hn / 2 { ui as i64 } else { ui as i64 - hn as i64 };
                    let (jpp, jp) = pair(c, 2 * u + par, n);
                    *slot = mat[(jpp * r + e / r, jp * r + e % r)];
                }
                plan_h.forward.process(&mut buf);
                for (k0, v) in buf.iter().enumerate() {
                    let phase = C64::from_polar(scale, -2.0 * std::f64::consts::PI * k0 as f64 * par as f64 / n as f64);
                    out[k0 * rr + e] = v * phase;
                }
            }
            out
        })
        .collect();
    let plan = FftPair::new(n);
    let stencil = (half == HalfPoint::Local).then(|| ShiftStencil::new(n, -0.5, LOCAL_WIDTH));
    let diffs: Vec<Vec<C64>> = (0..hn * rr)
        .into_par_iter()
        .map(|col| {
            let column: Vec<C64> = (0..n).map(|j| b[2 * j + 1][col]).collect();
            match &stencil {
                Some(st) => {
                    let mut out = vec![C64::new(0.0, 0.0); n];
                    st.apply(&column, &mut out);
                    out
                }
                None => {
                    let mut out = column;
                    spectral_half_shift(&plan, &mut out, -1.0);
                    out
                }
            }
        })
        .collect();
    let mut values = vec![C64::new(0.0, 0.0); n * n * rr];
    for j in 0..n {
        for k0 in 0..hn {
            for e in 0..rr {
                let s = b[2 * j][k0 * rr + e];
                let d = diffs[k0 * rr + e][j];
                values[(j * n + k0 + hn) * rr + e] = (s + d) * 0.5;
                values[(j * n + k0) * rr + e] = (s - d) * 0.5;
            }
        }
    }
    SymbolField::new(grid, OmegaRule::Weyl, r, values).expect("shape is consistent by construction")
}

/// Standard (position-left) quantization:
/// `K(j, j') = (1/L) sum_k exp(2 pi i k (j - j') / n) a(q_j, p_k)`.
pub fn standard_quantize(a: &SymbolField) -> Result<OperatorKernel> {
    require_rule(a, OmegaRule::Standard)?;
    let grid = *a.grid();
    let n = grid.n();
    let r = a.fiber();
    let rr = r * r;
    let vals = a.values();
    let inv_l = 1.0 / grid.extent();
    let plan = FftPair::new(n);
    let rows: Vec<Vec<C64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut out = vec![C64::new(0.0, 0.0); n * rr];
            let mut buf = vec![C64::new(0.0, 0.0); n];
            for e in 0..rr {
                for kk in 0..n {
                    buf[fft_index(kk, n)] = vals[(j * n + kk) * rr + e];
                }
                plan.inverse.process(&mut buf);
                for s in 0..n {
                    out[s * rr + e] = buf[s] * inv_l;
                }
            }
            out
        })
        .collect();
    let mut m = DMatrix::zeros(n * r, n * r);
    for (j, row) in rows.iter().enumerate() {
        for s in 0..n {
            let jp = (j + n - s) % n;
            for e in 0..rr {
                m[(j * r + e / r, jp * r + e % r)] = row[s * rr + e];
            }
        }
    }
    OperatorKernel::new(grid, r, m)
}

/// Standard symbol `a(q, p) = sum_v dq exp(-i p v / hbar) K(q, q - v)`,
/// the exact inverse of [`standard_quantize`].
pub fn standard_symbol_of(k: &OperatorKernel) -> SymbolField {
    let grid = *k.grid();
    let n = grid.n();
    let r = k.fiber();
    let rr = r * r;
    let mat = k.matrix();
    let dq = grid.dq();
    let plan = FftPair::new(n);
    let rows: Vec<Vec<C64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut out = vec![C64::new(0.0, 0.0); n * rr];
            let mut buf = vec![C64::new(0.0, 0.0); n];
            for e in 0..rr {
                for (s, slot) in buf.iter_mut().enumerate() {
                    *slot = mat[(j * r + e / r, ((j + n - s) % n) * r + e % r)];
                }
                plan.forward.process(&mut buf);
                for kk in 0..n {
                    out[kk * rr + e] = buf[fft_index(kk, n)] * dq;
                }
            }
            out
        })
        .collect();
    SymbolField::new(grid, OmegaRule::Standard, r, rows.concat()).expect("shape is consistent by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::flat_top;

    fn grid(n: usize) -> PhaseGrid {
        PhaseGrid::new(-8.0, 8.0, n, 1.0).unwrap()
    }

    fn gaussian(g: PhaseGrid) -> SymbolField {
        SymbolField::from_fn(g, OmegaRule::Weyl, |q, p| {
            C64::new((-(q - 0.5).powi(2) / 2.0 - p * p / 3.0).exp(), 0.2 * (-(q * q + p * p)).exp())
        })
    }

    #[test]
    fn constant_one_gives_identity() {
        let g = grid(32);
        let k = weyl_quantize_with(&SymbolField::constant(g, OmegaRule::Weyl, C64::new(1.0, 0.0)), HalfPoint::Local)
            .unwrap();
        let id = OperatorKernel::identity(g, 1);
        let d = (k.matrix() - id.matrix()).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(d < 1e-12, "{d}");
        let back = weyl_dequantize(&id);
        for v in back.values() {
            assert!((v - C64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn position_symbol_is_diagonal() {
        let g = grid(32);
        let k = weyl_quantize_scalar_fn(g, |q, _| C64::new(q, 0.0));
        for i in 0..32 {
            for j in 0..32 {
                let expect = if i == j { g.q(i) / g.dq() } else { 0.0 };
                assert!((k.matrix()[(i, j)] - C64::new(expect, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn momentum_symbol_differentiates_plane_waves() {
        let g = PhaseGrid::new(-20.0, 20.0, 256, 0.7).unwrap();
        let kw = 1.3;
        let k = weyl_quantize_scalar_fn(g, |_, p| C64::new(p, 0.0));
        let psi: Vec<C64> = (0..g.n())
            .map(|j| {
                let q = g.q(j);
                C64::from_polar(flat_top(q, 8.0, 18.0), kw * q)
            })
            .collect();
        let out = k.apply(&psi);
        for j in 0..g.n() {
            if g.q(j).abs() < 7.0 {
                let expect = psi[j] * (g.hbar() * kw);
                assert!((out[j] - expect).norm() / expect.norm() < 1e-6);
            }
        }
    }

    #[test]
    fn gaussian_round_trip() {
        let g = PhaseGrid::new(-10.0, 10.0, 64, 1.0).unwrap();
        let a = gaussian(g);
        let k = weyl_quantize(&a).unwrap();
        let back = weyl_dequantize(&k);
        assert!(back.max_diff(&a, None) < 1e-10);
        let k2 = weyl_quantize(&back).unwrap();
        let d = (k.matrix() - k2.matrix()).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(d < 1e-10 * k.max_abs());
    }

    #[test]
    fn decay_violation_is_reported() {
        let g = grid(32);
        let a = SymbolField::from_fn(g, OmegaRule::Weyl, |q, _| C64::new(q, 0.0));
        assert!(matches!(weyl_quantize(&a), Err(SymcalcError::GridTooSmall { .. })));
        let s = SymbolField::constant(g, OmegaRule::Standard, C64::new(1.0, 0.0));
        assert!(matches!(weyl_quantize(&s), Err(SymcalcError::RuleMismatch { .. })));
    }

    #[test]
    fn real_symbols_give_hermitian_kernels() {
        // the kernel must have decayed at half the period
        let g = PhaseGrid::new(-12.0, 12.0, 128, 1.0).unwrap();
        let a = SymbolField::from_fn(g, OmegaRule::Weyl, |q, p| C64::new((-(q * q) - (p - 1.0).powi(2)).exp() * q, 0.0));
        let k = weyl_quantize_with(&a, HalfPoint::Spectral).unwrap();
        assert!(k.hermitian_defect() < 1e-10);
    }

    #[test]
    fn standard_round_trips_are_exact() {
        let g = grid(32);
        let a = SymbolField::from_fn(g, OmegaRule::Standard, |q, p| C64::new(q * p, q - p * p));
        let k = standard_quantize(&a).unwrap();
        let back = standard_symbol_of(&k);
        assert!(back.max_diff(&a, None) < 1e-10);
        assert_eq!(standard_symbol_of(&OperatorKernel::identity(g, 1)).max_diff(
            &SymbolField::constant(g, OmegaRule::Standard, C64::new(1.0, 0.0)),
            None
        ) < 1e-12, true);
    }

    #[test]
    fn matrix_symbols_quantize_entrywise() {
        let g = grid(16);
        let k = weyl_quantize_fn(g, 2, |q, p, out| {
            out[0] = C64::new(1.0, 0.0);
            out[1] = C64::new(0.0, 0.0);
            out[2] = C64::new(0.0, 0.0);
            out[3] = C64::new((-(q * q + p * p)).exp(), 0.0);
        });
        let scalar = weyl_quantize_scalar_fn(g, |q, p| C64::new((-(q * q + p * p)).exp(), 0.0));
        for i in 0..16 {
            for j in 0..16 {
                assert!((k.matrix()[(2 * i + 1, 2 * j + 1)] - scalar.matrix()[(i, j)]).norm() < 1e-14);
                assert_eq!(k.matrix()[(2 * i, 2 * j + 1)], C64::new(0.0, 0.0));
            }
        }
        let back = weyl_dequantize(&k);
        assert!((back.entry(5, 7, 0, 0) - C64::new(1.0, 0.0)).norm() < 1e-10);
    }
}
