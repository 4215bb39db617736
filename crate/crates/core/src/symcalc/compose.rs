//! Composition of standard symbols.
//!
//! For symbols on the periodic grid,
//! `(a # b)(q_j, p_k) = (1/n) sum_{l, k'} a(q_j, p_k') b(q_l, p_k) exp(2 pi i (k' - k)(j - l) / n)`,
//! the discretized two-slice oscillatory integral. `a # b` is the symbol of
//! the product in which `b` acts first.

use rayon::prelude::*;

use super::{OmegaRule, Result, SymbolField, SymcalcError, C64};
use crate::numeric::FftPair;

fn check_pair(a: &SymbolField, b: &SymbolField) -> Result<()> {
    for s in [a, b] {
        if !s.rule().equivalent(&OmegaRule::Standard) {
            return Err(SymcalcError::RuleMismatch { expected: "standard".into(), found: s.rule().name() });
        }
    }
    if a.grid() != b.grid() || a.fiber() != b.fiber() {
        return Err(SymcalcError::Shape("composed symbols live on different grids or fibers".into()));
    }
    Ok(())
}

fn phase_table(n: usize) -> Vec<C64> {
    (0..n).map(|m| C64::from_polar(1.0, -2.0 * std::f64::consts::PI * m as f64 / n as f64)).collect()
}

/// `A(s) = sum_k' exp(2 pi i k' s / n) a(q_j, p_k')` for all `s`, per fiber entry.
fn row_transform(a: &SymbolField, plan: &FftPair, j: usize) -> Vec<C64> {
    let n = a.grid().n();
    let rr = a.fiber() * a.fiber();
    let mut out = vec![C64::new(0.0, 0.0); n * rr];
    let mut buf = vec![C64::new(0.0, 0.0); n];
    for e in 0..rr {
        for kk in 0..n {
            buf[(kk + n / 2) % n] = a.values()[(j * n + kk) * rr + e];
        }
        plan.inverse.process(&mut buf);
        for s in 0..n {
            out[s * rr + e] = buf[s];
        }
    }
    out
}

fn compose_row_entry(b: &SymbolField, arow: &[C64], phases: &[C64], j: usize, kk: usize, out: &mut [C64]) {
    let n = b.grid().n();
    let r = b.fiber();
    let rr = r * r;
    let k = (kk as i64 - (n / 2) as i64).rem_euclid(n as i64) as usize;
    out.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
    for s in 0..n {
        let l = (j + n - s) % n;
        let ph = phases[(k * s) % n];
        let ab = &arow[s * rr..(s + 1) * rr];
        let bb = &b.values()[(l * n + kk) * rr..(l * n + kk + 1) * rr];
        for x in 0..r {
            for y in 0..r {
                let mut acc = C64::new(0.0, 0.0);
                for z in 0..r {
                    acc += ab[x * r + z] * bb[z * r + y];
                }
                out[x * r + y] += acc * ph;
            }
        }
    }
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= inv);
}

/// `a # b` on the whole grid, with periodic semantics.
pub fn compose_standard(a: &SymbolField, b: &SymbolField) -> Result<SymbolField> {
    check_pair(a, b)?;
    let g = *a.grid();
    let n = g.n();
    let rr = a.fiber() * a.fiber();
    let plan = FftPair::new(n);
    let phases = phase_table(n);
    let rows: Vec<Vec<C64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let arow = row_transform(a, &plan, j);
            let mut row = vec![C64::new(0.0, 0.0); n * rr];
            for kk in 0..n {
                compose_row_entry(b, &arow, &phases, j, kk, &mut row[kk * rr..(kk + 1) * rr]);
            }
            row
        })
        .collect();
    SymbolField::new(g, OmegaRule::Standard, a.fiber(), rows.concat())
}

/// `a # b` at one grid point; returns the `r x r` fiber block.
pub fn compose_standard_at(a: &SymbolField, b: &SymbolField, j: usize, kk: usize) -> Result<Vec<C64>> {
    check_pair(a, b)?;
    let n = a.grid().n();
    if j >= n || kk >= n {
        return Err(SymcalcError::Shape(format!("point ({j}, {kk}) outside the {n}-point grid")));
    }
    let plan = FftPair::new(n);
    let arow = row_transform(a, &plan, j);
    let mut out = vec![C64::new(0.0, 0.0); a.fiber() * a.fiber()];
    compose_row_entry(b, &arow, &phase_table(n), j, kk, &mut out);
    Ok(out)
}

/// Bound on the part of the sum carried by pairs more than `3n/8` apart,
/// where periodic wrapping would corrupt a non-periodic integral.
pub fn quadrature_tail(a: &SymbolField, b: &SymbolField) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.grid().n();
    let rr = a.fiber() * a.fiber();
    let plan = FftPair::new(n);
    let bmax: Vec<f64> = (0..n)
        .map(|l| b.values()[l * n * rr..(l + 1) * n * rr].iter().map(|v| v.norm()).fold(0.0, f64::max))
        .collect();
    let far = 3 * n / 8;
    let tail = (0..n)
        .into_par_iter()
        .map(|j| {
            let arow = row_transform(a, &plan, j);
            let mut t = 0.0;
            for s in 0..n {
                if s.min(n - s) >= far {
                    let am = arow[s * rr..(s + 1) * rr].iter().map(|v| v.norm()).fold(0.0, f64::max);
                    t += am * bmax[(j + n - s) % n];
                }
            }
            t * a.fiber() as f64 / n as f64
        })
        .reduce(|| 0.0, f64::max);
    Ok(tail)
}

/// As [`compose_standard`], failing when the wrapped tail exceeds `tol`
/// relative to the result.
pub fn compose_standard_checked(a: &SymbolField, b: &SymbolField, tol: f64) -> Result<SymbolField> {
    let c = compose_standard(a, b)?;
    let tail = quadrature_tail(a, b)?;
    if tail > tol * c.max_abs().max(f64::MIN_POSITIVE) {
        return Err(SymcalcError::QuadratureNonconvergence { estimate: tail, tol });
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symcalc::{standard_quantize, standard_symbol_of, PhaseGrid};

    fn grid() -> PhaseGrid {
        PhaseGrid::new(-10.0, 10.0, 64, 1.0).unwrap()
    }

    fn gauss(g: PhaseGrid, q0: f64, p0: f64) -> SymbolField {
        SymbolField::from_fn(g, OmegaRule::Standard, move |q, p| {
            C64::new((-(q - q0).powi(2) / 2.0 - (p - p0).powi(2) / 3.0).exp(), 0.1 * (q * p / 4.0).sin())
                * (-(q * q + p * p) / 20.0).exp()
        })
    }

    fn product_symbol(a: &SymbolField, b: &SymbolField) -> SymbolField {
        let ka = standard_quantize(a).unwrap();
        let kb = standard_quantize(b).unwrap();
        standard_symbol_of(&ka.then_left(&kb))
    }

    #[test]
    fn identity_is_neutral() {
        let g = grid();
        let one = SymbolField::constant(g, OmegaRule::Standard, C64::new(1.0, 0.0));
        let b = gauss(g, 0.5, -1.0);
        assert!(compose_standard(&one, &b).unwrap().max_diff(&b, None) < 1e-12);
        assert!(compose_standard(&b, &one).unwrap().max_diff(&b, None) < 1e-12);
    }

    #[test]
    fn position_then_momentum() {
        let g = PhaseGrid::new(-4.0, 4.0, 32, 0.5).unwrap();
        let q = SymbolField::from_fn(g, OmegaRule::Standard, |q, _| C64::new(q, 0.0));
        let p = SymbolField::from_fn(g, OmegaRule::Standard, |_, p| C64::new(p, 0.0));
        let qp = compose_standard(&q, &p).unwrap();
        let expect = SymbolField::from_fn(g, OmegaRule::Standard, |q, p| C64::new(q * p, 0.0));
        assert!(qp.max_diff(&expect, None) < 1e-10);
        assert!(qp.max_diff(&product_symbol(&q, &p), None) < 1e-10);
    }

    #[test]
    fn matches_operator_product_and_is_associative() {
        let g = grid();
        let (a, b, c) = (gauss(g, 0.5, -1.0), gauss(g, -1.0, 0.3), gauss(g, 0.0, 1.0));
        let ab = compose_standard(&a, &b).unwrap();
        assert!(ab.max_diff(&product_symbol(&a, &b), None) < 1e-10 * ab.max_abs());
        let left = compose_standard(&ab, &c).unwrap();
        let right = compose_standard(&a, &compose_standard(&b, &c).unwrap()).unwrap();
        assert!(left.max_diff(&right, None) < 1e-10);
        let v = compose_standard_at(&a, &b, 30, 35).unwrap();
        assert!((v[0] - ab.at(30, 35)).norm() < 1e-13);
    }

    #[test]
    fn wrapped_tail_is_detected() {
        let g = PhaseGrid::new(-2.0, 2.0, 16, 1.0).unwrap();
        let a = SymbolField::from_fn(g, OmegaRule::Standard, |q, p| C64::new(q * p, 0.0));
        let b = SymbolField::from_fn(g, OmegaRule::Standard, |q, _| C64::new(q * q, 0.0));
        assert!(matches!(compose_standard_checked(&a, &b, 1e-6), Err(SymcalcError::QuadratureNonconvergence { .. })));
        let g = grid();
        let pure = |q0: f64| {
            SymbolField::from_fn(g, OmegaRule::Standard, move |q, p| C64::new((-(q - q0).powi(2) - p * p).exp(), 0.0))
        };
        assert!(compose_standard_checked(&pure(0.0), &pure(1.0), 1e-10).is_ok());
    }
}
