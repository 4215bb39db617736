//! Small numerical building blocks shared by the modules.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Smooth flat-top cutoff: exactly 1 for `|x| <= flat`, exactly 0 for
/// `|x| >= edge`, infinitely differentiable in between.
pub fn flat_top(x: f64, flat: f64, edge: f64) -> f64 {
    let ax = x.abs();
    if ax <= flat {
        return 1.0;
    }
    if ax >= edge {
        return 0.0;
    }
    let s = (ax - flat) / (edge - flat);
    let psi = |t: f64| if t > 0.0 { (-1.0 / t).exp() } else { 0.0 };
    let a = psi(1.0 - s);
    a / (a + psi(s))
}

/// Raised-cosine taper: 1 below `start`, 0 above `end`.
pub fn cosine_taper(x: f64, start: f64, end: f64) -> f64 {
    if x <= start {
        1.0
    } else if x >= end {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (x - start) / (end - start)).cos())
    }
}

/// Finite-difference weights for derivatives of order `0..=m` at `x0`
/// from values at `nodes` (Fornberg's recursion). `w[k][j]` is the weight
/// of node `j` in the k-th derivative.
pub fn fd_weights(x0: f64, nodes: &[f64], m: usize) -> Vec<Vec<f64>> {
    let n = nodes.len();
    let mut c = vec![vec![0.0; n]; m + 1];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Start index of a `width`-point stencil centred near `pos` and clamped to `[0, n)`.
pub fn stencil_start(pos: f64, width: usize, n: usize) -> usize {
    let ideal = (pos - (width as f64 - 1.0) / 2.0).round();
    ideal.clamp(0.0, (n - width) as f64) as usize
}

/// Least-squares slope of `y` against `x`.
pub fn fitted_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.len() != y.len() {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Some(sxy / sxx)
}

/// Forward and inverse plans of one length, shareable across threads.
#[derive(Clone)]
pub struct FftPair {
    pub len: usize,
    pub forward: Arc<dyn Fft<f64>>,
    pub inverse: Arc<dyn Fft<f64>>,
}

impl FftPair {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        FftPair { len, forward: planner.plan_fft_forward(len), inverse: planner.plan_fft_inverse(len) }
    }
}

/// Signed frequency index of FFT bin `m` for length `n`, in `[-n/2, n/2)`.
pub fn signed_bin(m: usize, n: usize) -> i64 {
    if m < n / 2 {
        m as i64
    } else {
        m as i64 - n as i64
    }
}

/// Half-sample shift of a periodic sequence by the Fourier shift theorem.
/// `direction = +1` maps samples at `j` to samples at `j + 1/2`.
pub fn spectral_half_shift(plan: &FftPair, data: &mut [Complex64], direction: f64) {
    let n = data.len();
    plan.forward.process(data);
    for (m, v) in data.iter_mut().enumerate() {
        let k = signed_bin(m, n) as f64;
        *v *= Complex64::from_polar(1.0 / n as f64, direction * std::f64::consts::PI * k / n as f64);
    }
    plan.inverse.process(data);
}

/// Lagrange interpolation from samples on `0..n` (unit spacing) to position `x`.
pub fn lagrange_at(values: &[Complex64], x: f64, width: usize) -> Complex64 {
    let n = values.len();
    let w = width.min(n);
    let start = stencil_start(x, w, n);
    let nodes: Vec<f64> = (start..start + w).map(|j| j as f64).collect();
    let wts = fd_weights(x, &nodes, 0);
    wts[0].iter().zip(&values[start..start + w]).map(|(a, v)| v * *a).sum()
}

/// Precomputed interpolation rows for shifting a grid by a constant offset.
pub struct ShiftStencil {
    pub starts: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
}

impl ShiftStencil {
    /// Interpolate samples at `j` (unit spacing) to positions `j + offset`.
    pub fn new(n: usize, offset: f64, width: usize) -> Self {
        let w = width.min(n);
        let mut starts = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for j in 0..n {
            let x = j as f64 + offset;
            let start = stencil_start(x, w, n);
            let nodes: Vec<f64> = (start..start + w).map(|i| i as f64).collect();
            starts.push(start);
            weights.push(fd_weights(x, &nodes, 0).swap_remove(0));
        }
        ShiftStencil { starts, weights }
    }

    pub fn apply(&self, input: &[Complex64], out: &mut [Complex64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let s = self.starts[j];
            *o = self.weights[j].iter().zip(&input[s..]).map(|(w, v)| v * *w).sum();
        }
    }
}

/// Derivative stencils of a fixed order on a uniform grid of spacing `h`.
pub struct DerivStencil {
    pub starts: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
}

impl DerivStencil {
    pub fn new(n: usize, h: f64, order: usize, width: usize) -> Self {
        let w = width.min(n).max(order + 1);
        let mut starts = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for j in 0..n {
            let start = stencil_start(j as f64, w, n);
            let nodes: Vec<f64> = (start..start + w).map(|i| (i as f64 - j as f64) * h).collect();
            let mut all = fd_weights(0.0, &nodes, order);
            starts.push(start);
            weights.push(all.swap_remove(order));
        }
        DerivStencil { starts, weights }
    }

    pub fn apply_strided(&self, input: &[Complex64], stride: usize, out: &mut [Complex64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let s = self.starts[j];
            *o = self.weights[j].iter().enumerate().map(|(i, w)| input[(s + i) * stride] * *w).sum();
        }
    }
}

/// Euclidean norm of a complex vector weighted by `dq`.
pub fn weighted_norm(v: &[Complex64], dq: f64) -> f64 {
    (v.iter().map(|z| z.norm_sqr()).sum::<f64>() * dq).sqrt()
}

/// Compact float formatting: shortest round-trip decimal, in scientific
/// notation outside a readable range.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 || (x.abs() >= 1e-4 && x.abs() < 1e15) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// Why an adaptive integration stopped early.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OdeStop {
    /// The step callback rejected the state.
    Rejected { t: f64 },
    NonFinite { t: f64 },
    StepUnderflow { t: f64 },
    TooManySteps { t: f64 },
}

const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Dormand-Prince 5(4) integration of `y' = f(t, y)` from `t0` through the
/// sorted `stops`, landing on each exactly. `on_step(t, y, at_stop)` sees
/// every accepted state and may reject it. Returns the accumulated local
/// error estimate.
pub fn dopri45(
    mut f: impl FnMut(f64, &[f64], &mut [f64]),
    t0: f64,
    y: &mut [f64],
    stops: &[f64],
    tol: f64,
    mut on_step: impl FnMut(f64, &[f64], bool) -> bool,
) -> Result<f64, OdeStop> {
    let n = y.len();
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut t = t0;
    let span = stops.last().map_or(0.0, |&e| e - t0);
    let mut h = 0.01 * span.abs().max(1e-3);
    let mut err_total = 0.0;
    let mut steps = 0usize;
    f(t, y, &mut k[0]);
    for &stop in stops {
        while t < stop {
            steps += 1;
            if steps > 200_000 {
                return Err(OdeStop::TooManySteps { t });
            }
            let last = t + h >= stop;
            let hh = if last { stop - t } else { h };
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = y[i];
                    for (j, kj) in k.iter().enumerate().take(s) {
                        acc += hh * DP_A[s][j] * kj[i];
                    }
                    tmp[i] = acc;
                }
                f(t + DP_C[s] * hh, &tmp, &mut k[s]);
            }
            ynew.copy_from_slice(&tmp);
            let mut err: f64 = 0.0;
            for i in 0..n {
                let e: f64 = (0..7).map(|s| DP_E[s] * k[s][i]).sum::<f64>() * hh;
                let sc = tol * (1.0 + y[i].abs().max(ynew[i].abs()));
                err = err.max(e.abs() / sc);
            }
            if !err.is_finite() {
                if hh < 1e-14 * (1.0 + t.abs()) {
                    return Err(OdeStop::NonFinite { t });
                }
                h = 0.25 * hh;
                continue;
            }
            if err <= 1.0 {
                t = if last { stop } else { t + hh };
                y.copy_from_slice(&ynew);
                err_total += err * tol;
                // first-same-as-last: the final stage is f at the new point
                let (first, rest) = k.split_at_mut(1);
                first[0].copy_from_slice(&rest[5]);
                if !on_step(t, y, last) {
                    return Err(OdeStop::Rejected { t });
                }
                if !last {
                    h = hh * (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
                }
            } else {
                h = hh * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
                if h < 1e-14 * (1.0 + t.abs()) {
                    return Err(OdeStop::StepUnderflow { t });
                }
            }
        }
    }
    Ok(err_total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_weights_reproduce_known_stencils() {
        let w = fd_weights(0.0, &[-1.0, 0.0, 1.0], 2);
        assert_eq!(w[1], vec![-0.5, 0.0, 0.5]);
        assert_eq!(w[2], vec![1.0, -2.0, 1.0]);
        let w = fd_weights(0.5, &[0.0, 1.0], 0);
        assert_eq!(w[0], vec![0.5, 0.5]);
    }

    #[test]
    fn derivative_stencil_is_exact_on_polynomials() {
        let n = 20;
        let h = 0.3;
        let f: Vec<Complex64> = (0..n).map(|j| Complex64::new((j as f64 * h).powi(5) - 2.0 * (j as f64 * h), 0.0)).collect();
        let st = DerivStencil::new(n, h, 2, 9);
        let mut out = vec![Complex64::default(); n];
        st.apply_strided(&f, 1, &mut out);
        for (j, o) in out.iter().enumerate() {
            let x = j as f64 * h;
            assert!((o.re - 20.0 * x.powi(3)).abs() < 1e-8 * (1.0 + x.powi(3)));
        }
    }

    #[test]
    fn dopri45_hits_stops_and_tolerance() {
        let mut y = [1.0, 0.0];
        let mut seen = Vec::new();
        let err = dopri45(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
            },
            0.0,
            &mut y,
            &[1.0, 2.0],
            1e-10,
            |t, y, stop| {
                if stop {
                    seen.push((t, y[0]));
                }
                true
            },
        )
        .unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[0].0, 1.0);
        assert!((seen[0].1 - 1f64.cos()).abs() < 1e-9);
        assert!((y[0] - 2f64.cos()).abs() < 1e-9 && (y[1] + 2f64.sin()).abs() < 1e-9);
        assert!(err < 1e-7);
        let mut y = [1.0];
        let r = dopri45(|_, y, dy| dy[0] = y[0], 0.0, &mut y, &[5.0], 1e-8, |_, y, _| y[0] < 10.0);
        assert!(matches!(r, Err(OdeStop::Rejected { .. })));
    }

    #[test]
    fn flat_top_is_smooth_and_bounded() {
        assert_eq!(flat_top(0.2, 0.5, 1.0), 1.0);
        assert_eq!(flat_top(-1.2, 0.5, 1.0), 0.0);
        let mid = flat_top(0.75, 0.5, 1.0);
        assert!((mid - 0.5).abs() < 1e-12);
        let mut prev = 1.0;
        for i in 0..100 {
            let v = flat_top(0.5 + i as f64 * 0.005, 0.5, 1.0);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn half_shift_round_trips() {
        let n = 32;
        let plan = FftPair::new(n);
        let orig: Vec<Complex64> = (0..n).map(|j| Complex64::new((-(j as f64 - 16.0).powi(2) / 8.0).exp(), 0.0)).collect();
        let mut v = orig.clone();
        spectral_half_shift(&plan, &mut v, 1.0);
        let expect = (-(0.5f64 + 16.0 - 16.0).powi(2) / 8.0).exp();
        assert!((v[16].re - expect).abs() < 1e-10);
        spectral_half_shift(&plan, &mut v, -1.0);
        for (a, b) in v.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn slope_fit() {
        let x = [0.0, 1.0, 2.0];
        let y = [1.0, 3.0, 5.0];
        assert!((fitted_slope(&x, &y).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1e-10, 12345.678, -3.5e20, 0.0, 1.0 / 3.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(fmt_f64(0.25), "0.25");
        assert_eq!(fmt_f64(1e-10), "1e-10");
    }
}
