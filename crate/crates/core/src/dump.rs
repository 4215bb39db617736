//! Little-endian binary dumps of symbols, kernels and covariant symbols.
//!
//! Layout (version 1):
//!
//! ```text
//! magic    "PSLC"
//! version  u32
//! kind     u8     0 symbol, 1 kernel, 2 covariant symbol
//! rule     u8     0 weyl, 1 standard, 2 wick, 3 s-parameter, 4 custom
//!          f64    s (tag 3), or u8 certified + u32 length + UTF-8 (tag 4)
//! d        u32
//! n_q      u32
//! q_min    f64
//! q_max    f64
//! hbar     f64
//! r        u32
//! kind 2 only:
//!   n_base u32, n_p u32, n_base f64 base points, n_p f64 momenta,
//!   u32 length + UTF-8 chart descriptor (TOML)
//! count    u64
//! payload  count complex values as (re f64, im f64), row-major
//! ```
//!
//! For kind 2 the grid fields hold the chart grid (`n_q` nodes spanning
//! `[q_min, q_max]`).

use nalgebra::DMatrix;
use thiserror::Error;

use crate::covsym::CovariantSymbol;
use crate::geom::ChartSpec;
use crate::symcalc::{OmegaRule, OperatorKernel, PhaseGrid, SymbolField, SymcalcError, C64};

pub const MAGIC: &[u8; 4] = b"PSLC";
pub const VERSION: u32 = 1;
/// Longest text block accepted by the decoder.
const MAX_TEXT: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DumpError {
    #[error("truncated input: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("unknown {what} tag {tag}")]
    Tag { what: &'static str, tag: u8 },
    #[error("invalid text block: {0}")]
    Text(String),
    #[error("payload has {found} values, header implies {expected}")]
    Count { expected: u64, found: u64 },
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error(transparent)]
    Symcalc(#[from] SymcalcError),
    #[error("invalid header: {0}")]
    Header(String),
}

/// A decoded dump.
#[derive(Debug, Clone, PartialEq)]
pub enum Dump {
    Symbol(SymbolField),
    Kernel(OperatorKernel),
    Covariant { chart: ChartSpec, grid: (f64, f64, usize), hbar: f64, symbol: CovariantSymbol },
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn text(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn rule(&mut self, rule: &OmegaRule) {
        match rule {
            OmegaRule::Weyl => self.u8(0),
            OmegaRule::Standard => self.u8(1),
            OmegaRule::Wick => self.u8(2),
            OmegaRule::SParam(s) => {
                self.u8(3);
                self.f64(*s);
            }
            OmegaRule::Custom(c) => {
                self.u8(4);
                self.u8(c.certified_nonzero as u8);
                self.text(&c.expr.to_string());
            }
        }
    }
    fn header(&mut self, kind: u8, rule: &OmegaRule, grid: (u32, f64, f64, f64), r: u32) {
        self.0.extend_from_slice(MAGIC);
        self.u32(VERSION);
        self.u8(kind);
        self.rule(rule);
        self.u32(1);
        self.u32(grid.0);
        self.f64(grid.1);
        self.f64(grid.2);
        self.f64(grid.3);
        self.u32(r);
    }
    fn payload<'a>(&mut self, values: impl ExactSizeIterator<Item = &'a C64>) {
        self.u64(values.len() as u64);
        for v in values {
            self.f64(v.re);
            self.f64(v.im);
        }
    }
}

fn grid_fields(g: &PhaseGrid) -> (u32, f64, f64, f64) {
    (g.n() as u32, g.q_min(), g.q_max(), g.hbar())
}

pub fn encode_symbol(a: &SymbolField) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.header(0, a.rule(), grid_fields(a.grid()), a.fiber() as u32);
    w.payload(a.values().iter());
    w.0
}

pub fn encode_kernel(k: &OperatorKernel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.header(1, &OmegaRule::Weyl, grid_fields(k.grid()), k.fiber() as u32);
    let m = k.matrix();
    let rows: Vec<C64> = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect();
    w.payload(rows.iter());
    w.0
}

/// Covariant symbol with its chart and the chart grid it was sampled from.
pub fn encode_covariant(chart: &ChartSpec, grid: (f64, f64, usize), hbar: f64, s: &CovariantSymbol) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.header(2, &s.rule, (grid.2 as u32, grid.0, grid.1, hbar), 1);
    w.u32(s.q.len() as u32);
    w.u32(s.p.len() as u32);
    s.q.iter().chain(&s.p).for_each(|v| w.f64(*v));
    w.text(&toml::to_string(chart).expect("chart specs serialize"));
    w.payload(s.values.iter());
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DumpError> {
        if self.buf.len() - self.pos < n {
            return Err(DumpError::Truncated { offset: self.pos, needed: n - (self.buf.len() - self.pos) });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn u8(&mut self) -> Result<u8, DumpError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, DumpError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DumpError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, DumpError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn text(&mut self) -> Result<&'a str, DumpError> {
        let n = self.u32()? as usize;
        if n > MAX_TEXT {
            return Err(DumpError::Text(format!("{n} bytes is too long")));
        }
        std::str::from_utf8(self.take(n)?).map_err(|e| DumpError::Text(e.to_string()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, DumpError> {
        if n.saturating_mul(8) > self.remaining() {
            return Err(DumpError::Truncated { offset: self.pos, needed: n.saturating_mul(8) - self.remaining() });
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn rule(&mut self) -> Result<OmegaRule, DumpError> {
        Ok(match self.u8()? {
            0 => OmegaRule::Weyl,
            1 => OmegaRule::Standard,
            2 => OmegaRule::Wick,
            3 => OmegaRule::sparam(self.f64()?)?,
            4 => {
                let certified = self.u8()? != 0;
                OmegaRule::custom(self.text()?, certified)?
            }
            tag => return Err(DumpError::Tag { what: "rule", tag }),
        })
    }
    fn payload(&mut self, expected: u64) -> Result<Vec<C64>, DumpError> {
        let count = self.u64()?;
        if count != expected {
            return Err(DumpError::Count { expected, found: count });
        }
        let bytes = usize::try_from(count).ok().and_then(|c| c.checked_mul(16));
        match bytes {
            Some(b) if b <= self.remaining() => {}
            _ => return Err(DumpError::Truncated { offset: self.pos, needed: usize::MAX }),
        }
        (0..count).map(|_| Ok(C64::new(self.f64()?, self.f64()?))).collect()
    }
}

/// Decodes any dump kind, validating every header field against the payload.
pub fn decode(bytes: &[u8]) -> Result<Dump, DumpError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(DumpError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DumpError::Version(version));
    }
    let kind = r.u8()?;
    let rule = r.rule()?;
    let d = r.u32()? as usize;
    let n = r.u32()? as usize;
    let (q_min, q_max, hbar) = (r.f64()?, r.f64()?, r.f64()?);
    let fiber = r.u32()? as usize;
    let dump = match kind {
        0 | 1 => {
            let grid = PhaseGrid::with_dimension(d, q_min, q_max, n, hbar)?;
            if fiber == 0 || fiber > 64 {
                return Err(DumpError::Header(format!("fiber rank {fiber}")));
            }
            let side = (n * fiber) as u64;
            let values = r.payload(side * side)?;
            if kind == 0 {
                Dump::Symbol(SymbolField::new(grid, rule, fiber, values)?)
            } else {
                let m = DMatrix::from_row_slice(n * fiber, n * fiber, &values);
                Dump::Kernel(OperatorKernel::new(grid, fiber, m)?)
            }
        }
        2 => {
            if d != 1 || fiber != 1 || !(q_min < q_max) || n < 2 || !(hbar > 0.0) {
                return Err(DumpError::Header(format!("covariant dump with d = {d}, r = {fiber}, n = {n}")));
            }
            let nb = r.u32()? as usize;
            let np = r.u32()? as usize;
            let q = r.f64s(nb)?;
            let p = r.f64s(np)?;
            let chart: ChartSpec = toml::from_str(r.text()?).map_err(|e| DumpError::Text(e.to_string()))?;
            let values = r.payload(nb as u64 * np as u64)?;
            Dump::Covariant { chart, grid: (q_min, q_max, n), hbar, symbol: CovariantSymbol { rule, q, p, values } }
        }
        tag => return Err(DumpError::Tag { what: "kind", tag }),
    };
    if r.remaining() > 0 {
        return Err(DumpError::Trailing(r.remaining()));
    }
    Ok(dump)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symcalc::weyl_quantize_scalar_fn;

    fn grid() -> PhaseGrid {
        PhaseGrid::new(-4.0, 4.0, 16, 0.5).unwrap()
    }

    #[test]
    fn symbol_round_trip() {
        let a = SymbolField::from_fn(grid(), OmegaRule::SParam(0.25), |q, p| C64::new(q, p * p));
        let bytes = encode_symbol(&a);
        assert_eq!(&bytes[..4], b"PSLC");
        assert_eq!(decode(&bytes).unwrap(), Dump::Symbol(a));
        let b = SymbolField::from_fn(grid(), OmegaRule::custom("1 + q^2", true).unwrap(), |_, _| C64::new(1.0, 0.0));
        assert_eq!(decode(&encode_symbol(&b)).unwrap(), Dump::Symbol(b));
    }

    #[test]
    fn kernel_and_covariant_round_trip() {
        let k = weyl_quantize_scalar_fn(grid(), |q, p| C64::new((-(q * q + p * p)).exp(), q));
        assert_eq!(decode(&encode_kernel(&k)).unwrap(), Dump::Kernel(k));
        let s = CovariantSymbol {
            rule: OmegaRule::Standard,
            q: vec![0.0, 0.5],
            p: vec![-1.0, 0.0, 1.0],
            values: (0..6).map(|i| C64::new(i as f64, -1.0)).collect(),
        };
        let chart = ChartSpec::exponential_line(-1.0, 1.0);
        let bytes = encode_covariant(&chart, (-1.0, 1.0, 41), 1.0, &s);
        match decode(&bytes).unwrap() {
            Dump::Covariant { chart: c, grid, symbol, .. } => {
                assert_eq!(c, chart);
                assert_eq!(grid, (-1.0, 1.0, 41));
                assert_eq!(symbol, s);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let a = SymbolField::from_fn(grid(), OmegaRule::Weyl, |q, _| C64::new(q, 0.0));
        let bytes = encode_symbol(&a);
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(DumpError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(DumpError::BadMagic(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(DumpError::Trailing(1))));
        let mut n_bad = bytes;
        n_bad[14..18].copy_from_slice(&12u32.to_le_bytes());
        assert!(decode(&n_bad).is_err());
    }
}
