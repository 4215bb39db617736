//! Numerical engine for time-sliced path integrals in ordering-rule symbol
//! calculus, on flat phase space and on chart-described metric-affine
//! manifolds.

pub mod expr;
pub mod numeric;
pub mod symcalc;
pub mod slicer;
pub mod pathint;
pub mod geom;
pub mod covsym;
pub mod config;
pub mod dump;
