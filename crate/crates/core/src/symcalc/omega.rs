//! Change of ordering rule between symbol fields.

use rayon::prelude::*;

use super::{OmegaRule, Result, SymbolField, SymcalcError, C64, EDGE_TOL, OMEGA_FLOOR};
use crate::expr::{Bound, Expr};
use crate::numeric::{signed_bin, DerivStencil, FftPair};

const MAX_AMPLIFICATION: f64 = 1e12;
/// Fourier bins below this fraction of the peak are treated as empty.
const EMPTY_BIN: f64 = 1e-13;
/// Series terms below this (relative to `1 + max |a|`) are negligible.
const SERIES_TOL: f64 = 1e-10;
const STENCIL_WIDTH: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OmegaMethod {
    /// Fourier multiplier for fields decaying at the grid edges, series
    /// otherwise.
    Auto,
    Fourier,
    /// Taylor series of the multiplier ratio applied with finite
    /// differences, up to total derivative order `max_order`.
    Series { max_order: usize },
}

pub fn omega_transform(a: &SymbolField, to: &OmegaRule) -> Result<SymbolField> {
    omega_transform_with(a, to, OmegaMethod::Auto)
}

pub fn omega_transform_with(a: &SymbolField, to: &OmegaRule, method: OmegaMethod) -> Result<SymbolField> {
    if a.rule().equivalent(to) {
        return Ok(a.clone().with_rule(to.clone()));
    }
    let hbar = a.grid().hbar();
    let m_from = a.rule().multiplier(hbar);
    let m_to = to.multiplier(hbar);
    let (eq, ep) = a.edge_magnitude();
    let decays = eq.max(ep) <= EDGE_TOL;
    match method {
        OmegaMethod::Fourier if !decays => Err(SymcalcError::GridTooSmall { edge: eq.max(ep) }),
        OmegaMethod::Fourier => fourier_path(a, to, &m_from, &m_to),
        OmegaMethod::Auto if decays => fourier_path(a, to, &m_from, &m_to),
        OmegaMethod::Auto => series_path(a, to, &m_from, &m_to, 8),
        OmegaMethod::Series { max_order } => series_path(a, to, &m_from, &m_to, max_order),
    }
}

/// Multiplier ratio on the discrete frequency box, row-major over
/// `(q frequency bin, p frequency bin)`.
fn frequency_ratio(a: &SymbolField, m_from: &Bound, m_to: &Bound) -> Result<Vec<C64>> {
    let g = a.grid();
    let n = g.n();
    let hbar = g.hbar();
    let two_pi = 2.0 * std::f64::consts::PI;
    let xq = |m: usize| hbar * two_pi * signed_bin(m, n) as f64 / g.extent();
    let yp = |m: usize| hbar * two_pi * signed_bin(m, n) as f64 / (n as f64 * g.dp());
    let rows: Vec<Result<Vec<C64>>> = (0..n)
        .into_par_iter()
        .map(|mq| {
            let x = xq(mq);
            let mut row = Vec::with_capacity(n);
            for mp in 0..n {
                let y = yp(mp);
                let (f, t) = (m_from.eval_real(&[x, y]), m_to.eval_real(&[x, y]));
                for m in [f, t] {
                    // m = 1/Omega; Omega may overflow harmlessly but not vanish
                    if !(m.re.is_finite() && m.im.is_finite()) || m.norm() * OMEGA_FLOOR > 1.0 {
                        return Err(SymcalcError::OmegaNearZero { x, y, modulus: 1.0 / m.norm() });
                    }
                }
                row.push(if f.norm() == 0.0 { C64::new(f64::INFINITY, 0.0) } else { t / f });
            }
            Ok(row)
        })
        .collect();
    let mut out = Vec::with_capacity(n * n);
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

fn fft2(plan: &FftPair, data: &mut [C64], n: usize, inverse: bool) {
    let fft = if inverse { &plan.inverse } else { &plan.forward };
    data.par_chunks_mut(n).for_each(|row| fft.process(row));
    let mut t = vec![C64::new(0.0, 0.0); n * n];
    for j in 0..n {
        for k in 0..n {
            t[k * n + j] = data[j * n + k];
        }
    }
    t.par_chunks_mut(n).for_each(|col| fft.process(col));
    for j in 0..n {
        for k in 0..n {
            data[j * n + k] = t[k * n + j];
        }
    }
}

fn fourier_path(a: &SymbolField, to: &OmegaRule, m_from: &Expr, m_to: &Expr) -> Result<SymbolField> {
    let g = *a.grid();
    let n = g.n();
    let r = a.fiber();
    let ratio = frequency_ratio(a, &m_from.bind(&["x", "y"])?, &m_to.bind(&["x", "y"])?)?;
    let plan = FftPair::new(n);
    let norm = 1.0 / (n * n) as f64;
    let mut out = a.clone().with_rule(to.clone());
    for ea in 0..r {
        for eb in 0..r {
            let mut comp = a.component(ea, eb);
            fft2(&plan, &mut comp, n, false);
            let peak = comp.iter().map(|v| v.norm()).fold(0.0, f64::max);
            for (v, m) in comp.iter_mut().zip(&ratio) {
                let amp = if m.norm().is_finite() { m.norm() } else { f64::INFINITY };
                if v.norm() <= EMPTY_BIN * peak {
                    // do not amplify roundoff
                    *v = if amp > 1.0 { C64::new(0.0, 0.0) } else { *v * m };
                } else if amp > MAX_AMPLIFICATION {
                    return Err(SymcalcError::IllConditioned { amplification: amp });
                } else {
                    *v *= m;
                }
            }
            fft2(&plan, &mut comp, n, true);
            for v in comp.iter_mut() {
                *v *= norm;
            }
            out.set_component(ea, eb, &comp);
        }
    }
    Ok(out)
}

/// Repeated finite-difference derivatives of a field along one axis.
struct AxisDerivs {
    n: usize,
    stencils: Vec<DerivStencil>,
}

impl AxisDerivs {
    fn new(n: usize, h: f64, max_order: usize) -> Self {
        AxisDerivs { n, stencils: (1..=max_order).map(|o| DerivStencil::new(n, h, o, STENCIL_WIDTH)).collect() }
    }

    /// `order`-th derivative along the p axis (`along_q = false`) or q axis.
    fn apply(&self, vals: &[C64], rr: usize, order: usize, along_q: bool) -> Vec<C64> {
        if order == 0 {
            return vals.to_vec();
        }
        let n = self.n;
        let st = &self.stencils[order - 1];
        let mut out = vec![C64::new(0.0, 0.0); vals.len()];
        let mut line = vec![C64::new(0.0, 0.0); n];
        for outer in 0..n {
            for e in 0..rr {
                let (offset, stride) = if along_q { (outer * rr + e, n * rr) } else { (outer * n * rr + e, rr) };
                st.apply_strided(&vals[offset..], stride, &mut line);
                for (i, v) in line.iter().enumerate() {
                    out[offset + i * stride] = *v;
                }
            }
        }
        out
    }
}

fn series_path(a: &SymbolField, to: &OmegaRule, m_from: &Expr, m_to: &Expr, kmax: usize) -> Result<SymbolField> {
    let g = *a.grid();
    let n = g.n();
    let hbar = g.hbar();
    let rr = a.fiber() * a.fiber();
    let zero = C64::new(0.0, 0.0);
    for m in [m_from, m_to] {
        let omega = m.eval_with(&[("x", zero), ("y", zero)])?.inv();
        if omega.norm() < OMEGA_FLOOR || !omega.re.is_finite() {
            return Err(SymcalcError::OmegaNearZero { x: 0.0, y: 0.0, modulus: omega.norm() });
        }
    }
    let ratio = m_to.clone() / m_from.clone();
    let coeffs = ratio.taylor2(("x", zero), ("y", zero), kmax, &[])?;
    let vals = a.values();
    let tol = SERIES_TOL * (1.0 + a.max_abs());
    let dq = AxisDerivs::new(n, g.dq(), kmax);
    let dp = AxisDerivs::new(n, g.dp(), kmax);
    let mut p_derivs: Vec<Option<Vec<C64>>> = vec![None; kmax + 1];
    let mut out = vec![zero; vals.len()];
    let mut quiet = 0;
    let mut last = 0.0;
    for k in 0..=kmax {
        let w = C64::new(0.0, -hbar).powu(k as u32);
        let mut term = vec![zero; vals.len()];
        for aq in 0..=k {
            let b = k - aq;
            let c = coeffs.coeff(aq, b);
            if c.norm() == 0.0 {
                continue;
            }
            let pd = p_derivs[b].get_or_insert_with(|| dp.apply(vals, rr, b, false));
            let d = dq.apply(pd, rr, aq, true);
            let cw = c * w;
            for (t, v) in term.iter_mut().zip(&d) {
                *t += cw * v;
            }
        }
        let mag = term.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (o, t) in out.iter_mut().zip(&term) {
            *o += t;
        }
        if mag <= tol {
            quiet += 1;
            if quiet >= 2 {
                return SymbolField::new(g, to.clone(), a.fiber(), out);
            }
        } else {
            quiet = 0;
            last = mag;
        }
    }
    Err(SymcalcError::SeriesTruncation { estimate: last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::flat_top;
    use crate::symcalc::{standard_quantize, standard_symbol_of, weyl_quantize_with, HalfPoint, PhaseGrid};

    fn gauss(g: PhaseGrid) -> SymbolField {
        SymbolField::from_fn(g, OmegaRule::Weyl, |q, p| {
            C64::new((-(q - 0.3).powi(2) / 2.0 - p * p / 2.0).exp(), 0.3 * (-(q * q) - (p - 0.5).powi(2)).exp())
        })
    }

    #[test]
    fn qp_weyl_to_standard() {
        let g = PhaseGrid::new(-4.0, 4.0, 32, 0.7).unwrap();
        let a = SymbolField::from_fn(g, OmegaRule::Weyl, |q, p| C64::new(q * p, 0.0));
        let s = omega_transform(&a, &OmegaRule::Standard).unwrap();
        let expect = a.map(|_, _, v| v - C64::new(0.0, 0.35));
        assert!(s.max_diff(&expect, None) < 1e-8);
    }

    #[test]
    fn windowed_qp_through_kernels() {
        let g = PhaseGrid::new(-16.0, 16.0, 256, 0.7).unwrap();
        let w = |x: f64| flat_top(x, 4.0, 14.0);
        let a = SymbolField::from_fn(g, OmegaRule::Weyl, |q, p| C64::new(q * p * w(q) * w(p), 0.0));
        let s = omega_transform(&a, &OmegaRule::Standard).unwrap();
        let direct = standard_symbol_of(&weyl_quantize_with(&a, HalfPoint::Spectral).unwrap());
        assert!(direct.max_diff(&s, None) < 1e-9);
        let expect = SymbolField::from_fn(g, OmegaRule::Standard, |q, p| C64::new(q * p, -0.35));
        // the multiplier is nonlocal, so the window leaks weakly into the flat region
        assert!(s.max_diff(&expect, Some((1.0, 1.0))) < 1e-8);
    }

    #[test]
    fn harmonic_wick_to_weyl() {
        let g = PhaseGrid::new(-4.0, 4.0, 32, 1.0).unwrap();
        let a = SymbolField::from_fn(g, OmegaRule::Wick, |q, p| C64::new(0.5 * (q * q + p * p), 0.0));
        let w = omega_transform(&a, &OmegaRule::Weyl).unwrap();
        let expect = a.map(|_, _, v| v - 0.5);
        assert!(w.max_diff(&expect, None) < 1e-8);
    }

    #[test]
    fn constants_are_unchanged() {
        let g = PhaseGrid::new(-4.0, 4.0, 16, 1.0).unwrap();
        let c = SymbolField::constant(g, OmegaRule::Wick, C64::new(2.0, -1.0));
        for to in [OmegaRule::Weyl, OmegaRule::Standard, OmegaRule::SParam(0.2)] {
            let t = omega_transform(&c, &to).unwrap();
            assert!(t.max_diff(&c, None) < 1e-12);
            assert_eq!(t.rule(), &to);
        }
    }

    #[test]
    fn fourier_round_trip_and_group_law() {
        let g = PhaseGrid::new(-16.0, 16.0, 128, 1.0).unwrap();
        let a = gauss(g);
        let s = omega_transform(&a, &OmegaRule::Standard).unwrap();
        let back = omega_transform(&s, &OmegaRule::Weyl).unwrap();
        assert!(back.max_diff(&a, None) < 1e-10);
        let m = omega_transform(&a, &OmegaRule::SParam(0.8)).unwrap();
        let ms = omega_transform(&m, &OmegaRule::SParam(0.25)).unwrap();
        let direct = omega_transform(&a, &OmegaRule::SParam(0.25)).unwrap();
        assert!(ms.max_diff(&direct, None) < 1e-10);
    }

    #[test]
    fn wick_round_trip() {
        let g = PhaseGrid::new(-8.0, 8.0, 512, 0.1).unwrap();
        let a = gauss(g);
        let w = omega_transform(&a, &OmegaRule::Wick).unwrap();
        assert!(w.max_diff(&a, None) > 1e-3);
        let back = omega_transform(&w, &OmegaRule::Weyl).unwrap();
        assert!(back.max_diff(&a, None) < 1e-10);
    }

    #[test]
    fn fourier_standard_matches_kernel_route() {
        let g = PhaseGrid::new(-10.0, 10.0, 64, 1.0).unwrap();
        let a = gauss(g);
        let s = omega_transform(&a, &OmegaRule::Standard).unwrap();
        let k = weyl_quantize_with(&a, HalfPoint::Spectral).unwrap();
        assert!(standard_symbol_of(&k).max_diff(&s, None) < 1e-10);
        let k2 = standard_quantize(&s).unwrap();
        let d = (k.matrix() - k2.matrix()).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(d < 1e-10);
    }

    #[test]
    fn custom_rule_equal_to_standard() {
        let g = PhaseGrid::new(-10.0, 10.0, 64, 1.0).unwrap();
        let a = gauss(g);
        let custom = OmegaRule::custom("exp(-i*q*p/(2*hbar))", true).unwrap();
        let s = omega_transform(&a, &custom).unwrap();
        let t = omega_transform(&a, &OmegaRule::Standard).unwrap();
        assert!(s.max_diff(&t, None) < 1e-10);
    }

    #[test]
    fn zeroes_of_omega_are_rejected() {
        let g = PhaseGrid::new(-10.0, 10.0, 64, 1.0).unwrap();
        let a = gauss(g);
        let bad = OmegaRule::custom("q", false).unwrap();
        assert!(matches!(omega_transform(&a, &bad), Err(SymcalcError::OmegaNearZero { .. })));
    }

    #[test]
    fn unbounded_amplification_is_rejected() {
        let g = PhaseGrid::new(-3.0, 3.0, 64, 1.0).unwrap();
        let a = SymbolField::from_fn(g, OmegaRule::Wick, |q, p| C64::new((-(q * q + p * p) * 4.0).exp(), 0.0));
        assert!(matches!(omega_transform(&a, &OmegaRule::Weyl), Err(SymcalcError::IllConditioned { .. })));
    }

    #[test]
    fn series_truncation_is_reported() {
        let g = PhaseGrid::new(-2.0, 2.0, 32, 1.0).unwrap();
        let a = SymbolField::from_fn(g, OmegaRule::Weyl, |q, p| C64::new((q * p).sin() * 3.0 + q, 0.0));
        let r = omega_transform_with(&a, &OmegaRule::Standard, OmegaMethod::Series { max_order: 4 });
        assert!(matches!(r, Err(SymcalcError::SeriesTruncation { .. })));
    }
}
