#![no_main]

use libfuzzer_sys::fuzz_target;
use pathslice::geom::{ChartSpec, ManifoldChart};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let Ok(spec) = toml::from_str::<ChartSpec>(s) else { return };
    if let Ok(chart) = ManifoldChart::new(&spec) {
        let mid: Vec<f64> = chart.domain().iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
        let _ = chart.christoffel(&mid);
        let _ = chart.torsion(&mid);
    }
});
