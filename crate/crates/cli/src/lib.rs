//! Scenario runner behind the `pathslice` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::ValueEnum;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use pathslice::config::{ConfigError, OracleKind, Validated};
use pathslice::covsym::{
    covariant_slice_integral, covariant_standard_symbol, covariant_weyl_symbol, kinetic_hamiltonian, resolvent_product_oracle, window_proper,
    CovsymError, LineChart, ManifoldKernel,
};
use pathslice::dump;
use pathslice::geom::{GeomError, NormalNeighborhood};
use pathslice::numeric::fmt_f64;
use pathslice::pathint::{
    backward_euler_hamilton, iterated_compose_symbol, multiple_integral_symbol, product_symbol_oracle, stationary_path,
    PathintError, QuadratureSpec, SliceAction, Window,
};
use pathslice::slicer::{
    apply_partition, convergence_study, free_particle_oracle, gaussian_packet, spectral_oracle, SlicerError, StateVector,
};
use pathslice::symcalc::{
    diagnose, omega_transform, standard_quantize, standard_symbol_of, weyl_dequantize, weyl_quantize, DiagnoseOptions,
    OmegaRule, SymbolField, SymcalcError,
};

pub const MANIFEST_SCHEMA: &str = "pathslice-manifest/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Quantize,
    Transform,
    Propagate,
    Converge,
    Pathint,
    Geodesic,
    Covsym,
    Semiclassical,
    Validate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Quantize => "quantize",
            Command::Transform => "transform",
            Command::Propagate => "propagate",
            Command::Converge => "converge",
            Command::Pathint => "pathint",
            Command::Geodesic => "geodesic",
            Command::Covsym => "covsym",
            Command::Semiclassical => "semiclassical",
            Command::Validate => "validate",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Symcalc(#[from] SymcalcError),
    #[error(transparent)]
    Slicer(#[from] SlicerError),
    #[error(transparent)]
    Pathint(#[from] PathintError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Covsym(#[from] CovsymError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io { .. } => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            RunError::Config(e) => json!({"error": {"kind": "config", "key": e.key(), "message": e.to_string()}}),
            RunError::Io { path, source } => {
                json!({"error": {"kind": "io", "path": path.display().to_string(), "message": source.to_string()}})
            }
            other => json!({"error": {"kind": "run", "message": other.to_string()}}),
        }
    }
}

pub type Result<T> = std::result::Result<T, RunError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: String,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, limit: f64) -> Check {
        Check { name: name.into(), value, limit: format!("<= {}", fmt_f64(limit)), passed: value <= limit }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub files: Vec<String>,
    pub checks: Vec<Check>,
    pub summary: serde_json::Map<String, Value>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
    fn note(&mut self, key: &str, v: impl Into<Value>) {
        self.summary.insert(key.into(), v.into());
    }
    fn limit(&mut self, name: &str, value: f64, limit: Option<f64>) {
        if let Some(l) = limit {
            self.checks.push(Check::at_most(name, value, l));
        }
    }
}

struct Out<'a> {
    dir: &'a Path,
    outcome: Outcome,
}

impl Out<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|source| RunError::Io { path, source })?;
        self.outcome.files.push(name.into());
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
        let mut text = header.join(",");
        text.push('\n');
        for row in rows {
            let cells: Vec<String> = row.into_iter().map(fmt_f64).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        self.write(name, text.as_bytes())
    }
}

/// Sections each command needs, checked before any computation.
pub fn requirements(cmd: Command, v: &Validated) -> std::result::Result<(), ConfigError> {
    let s = &v.scenario;
    let missing = |key: &str| Err(ConfigError::Invalid { key: key.into(), message: format!("required by `{}`", cmd.name()) });
    let needs_partition = matches!(cmd, Command::Propagate | Command::Converge | Command::Pathint | Command::Semiclassical);
    if needs_partition && v.schedule.is_empty() {
        return missing("partition");
    }
    if matches!(cmd, Command::Propagate | Command::Converge) {
        if s.packet.is_none() {
            return missing("packet");
        }
        if v.hamiltonian.fiber() != 1 {
            return Err(ConfigError::Invalid { key: "hamiltonian.entries".into(), message: "packets are scalar".into() });
        }
        if s.oracle.kind == OracleKind::LaplaceBeltrami {
            return Err(ConfigError::Invalid { key: "oracle.kind".into(), message: "not a flat propagation oracle".into() });
        }
    }
    if cmd == Command::Transform && v.target.is_none() {
        return missing("target");
    }
    if matches!(cmd, Command::Pathint | Command::Semiclassical | Command::Covsym) && s.points.is_none() {
        return missing("points");
    }
    if cmd == Command::Pathint && v.schedule[0].len() > 3 {
        return Err(ConfigError::Invalid { key: "partition.slices".into(), message: "at most 3 slices".into() });
    }
    if cmd == Command::Geodesic {
        if v.chart.is_none() {
            return missing("chart");
        }
        if s.geodesic.is_none() {
            return missing("geodesic");
        }
    }
    if cmd == Command::Covsym {
        if s.covsym.is_none() {
            return missing("covsym");
        }
        if s.oracle.kind == OracleKind::LaplaceBeltrami {
            if v.schedule.is_empty() {
                return missing("partition");
            }
            if v.schedule[0].len() > 2 {
                return Err(ConfigError::Invalid { key: "partition.slices".into(), message: "at most 2 slices".into() });
            }
        }
    }
    Ok(())
}

/// Runs `cmd` and writes its outputs and `manifest.json` into `dir`.
pub fn run(cmd: Command, v: &Validated, dir: &Path, seed: u64) -> Result<Outcome> {
    requirements(cmd, v)?;
    fs::create_dir_all(dir).map_err(|source| RunError::Io { path: dir.to_path_buf(), source })?;
    let mut out = Out { dir, outcome: Outcome::default() };
    match cmd {
        Command::Quantize => quantize(v, &mut out)?,
        Command::Transform => transform(v, &mut out)?,
        Command::Propagate => propagate(v, &mut out)?,
        Command::Converge => converge(v, &mut out)?,
        Command::Pathint => pathint(v, &mut out)?,
        Command::Geodesic => geodesic(v, &mut out)?,
        Command::Covsym => covsym(v, &mut out)?,
        Command::Semiclassical => semiclassical(v, &mut out)?,
        Command::Validate => validate(v, &mut out, seed)?,
    }
    let manifest = manifest(cmd, v, seed, &out.outcome);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    out.write("manifest.json", text.as_bytes())?;
    Ok(out.outcome)
}

pub fn manifest(cmd: Command, v: &Validated, seed: u64, outcome: &Outcome) -> Value {
    let g = &v.grid;
    json!({
        "schema": MANIFEST_SCHEMA,
        "scenario": v.scenario.name,
        "command": cmd.name(),
        "config_sha256": v.hash,
        "seed": seed,
        "grid": {"q_min": g.q_min(), "q_max": g.q_max(), "n": g.n(), "hbar": g.hbar()},
        "rule": v.rule.name(),
        "conventions": {
            "momenta": "p_k = (k - n/2) dp, dp = 2 pi hbar / L",
            "kernel_action": "(K psi)_i = sum_j K_ij psi_j dq",
            "standard_ordering": "q left of p",
            "composition": "a # b with b acting first",
            "slice_product": "earliest slice acts first",
            "chart_volume": "sqrt(g(q)) dq",
            "covector_rule": format!("{:?}", v.covector).to_lowercase(),
            "float_format": "shortest round-trip decimal",
        },
        "files": outcome.files,
        "checks": outcome.checks,
        "summary": outcome.summary,
        "passed": outcome.passed(),
    })
}

fn start_time(v: &Validated) -> f64 {
    v.scenario.partition.as_ref().map_or(0.0, |p| p.t0)
}

fn sampled_symbol(v: &Validated, rule: OmegaRule) -> SymbolField {
    let f = &v.hamiltonian;
    let t = start_time(v);
    SymbolField::from_fn_matrix(v.grid, rule, f.fiber(), |q, p, o| f.value_into(t, q, p, o))
}

fn symbol_rows(a: &SymbolField, b: &SymbolField) -> Vec<Vec<f64>> {
    let g = a.grid();
    let mut rows = Vec::with_capacity(g.n() * g.n());
    for j in 0..g.n() {
        for k in 0..g.n() {
            let (x, y) = (a.entry(j, k, 0, 0), b.entry(j, k, 0, 0));
            rows.push(vec![g.q(j), g.p(k), x.re, x.im, y.re, y.im]);
        }
    }
    rows
}

fn quantize(v: &Validated, out: &mut Out) -> Result<()> {
    let a = sampled_symbol(v, v.rule.clone());
    let (kernel, back) = if v.rule.equivalent(&OmegaRule::Standard) {
        let k = standard_quantize(&a)?;
        let back = standard_symbol_of(&k);
        (k, back)
    } else {
        let k = weyl_quantize(&omega_transform(&a, &OmegaRule::Weyl)?)?;
        let back = omega_transform(&weyl_dequantize(&k), &v.rule)?;
        (k, back)
    };
    let diff = back.max_diff(&a, None);
    out.write("kernel.bin", &dump::encode_kernel(&kernel))?;
    out.write("symbol.bin", &dump::encode_symbol(&a))?;
    out.csv("roundtrip.csv", &["q", "p", "re", "im", "back_re", "back_im"], symbol_rows(&a, &back))?;
    out.outcome.note("roundtrip_max_diff", diff);
    out.outcome.limit("roundtrip", diff, v.scenario.checks.max_diff);
    Ok(())
}

fn transform(v: &Validated, out: &mut Out) -> Result<()> {
    let target = v.target.clone().expect("checked by requirements");
    let a = sampled_symbol(v, v.rule.clone());
    let b = omega_transform(&a, &target)?;
    let back = omega_transform(&b, &v.rule)?;
    let diff = back.max_diff(&a, None);
    out.write("symbol.bin", &dump::encode_symbol(&b))?;
    out.csv("transform.csv", &["q", "p", "re", "im", "to_re", "to_im"], symbol_rows(&a, &b))?;
    out.outcome.note("target", target.name());
    out.outcome.note("group_law_max_diff", diff);
    out.outcome.limit("group_law", diff, v.scenario.checks.max_diff);
    Ok(())
}

fn packet(v: &Validated) -> StateVector {
    let pk = v.scenario.packet.as_ref().expect("checked by requirements");
    gaussian_packet(v.grid, pk.q0, pk.width, pk.k)
}

fn oracle_state(v: &Validated, psi0: &StateVector) -> Result<Option<StateVector>> {
    let duration = v.schedule[0].end() - v.schedule[0].start();
    Ok(match v.scenario.oracle.kind {
        OracleKind::Spectral => Some(psi0.apply(&spectral_oracle(&v.hamiltonian, &v.grid, duration)?)),
        OracleKind::Free => Some(free_particle_oracle(psi0, duration)),
        _ => None,
    })
}

fn propagate(v: &Validated, out: &mut Out) -> Result<()> {
    let psi0 = packet(v);
    let part = v.schedule.last().expect("checked by requirements");
    let psi = apply_partition(&v.hamiltonian, part, &psi0)?;
    let g = v.grid;
    out.csv(
        "state.csv",
        &["q", "re", "im", "abs2"],
        psi.values().iter().enumerate().map(|(j, z)| vec![g.q(j), z.re, z.im, z.norm_sqr()]),
    )?;
    let drift = (psi.norm() / psi0.norm() - 1.0).abs();
    out.outcome.note("slices", part.len());
    out.outcome.note("norm", psi.norm());
    out.outcome.limit("norm_drift", drift, v.scenario.checks.norm_drift);
    if let Some(o) = oracle_state(v, &psi0)? {
        let err = psi.distance(&o);
        out.outcome.note("error", err);
        out.outcome.limit("final_error", err, v.scenario.checks.final_error);
    }
    Ok(())
}

fn converge(v: &Validated, out: &mut Out) -> Result<()> {
    let psi0 = packet(v);
    let oracle = oracle_state(v, &psi0)?;
    let table = convergence_study(&v.hamiltonian, &v.schedule, &psi0, oracle.as_ref())?;
    out.csv(
        "convergence.csv",
        &["N", "mesh", "error", "norm"],
        table.rows.iter().map(|r| vec![r.slices as f64, r.mesh, r.error, r.norm]),
    )?;
    // wall-clock times vary run to run, so they stay out of the table above
    out.csv("timing.csv", &["N", "seconds"], table.rows.iter().map(|r| vec![r.slices as f64, r.seconds]))?;
    let checks = &v.scenario.checks;
    let order = table.order.unwrap_or(f64::NAN);
    out.outcome.note("order", order);
    out.outcome.note("reference", format!("{:?}", table.reference).to_lowercase());
    out.outcome.note("monotone", table.is_monotone());
    if let Some([lo, hi]) = checks.order {
        let passed = order >= lo && order <= hi;
        out.outcome.checks.push(Check { name: "order".into(), value: order, limit: format!("in [{lo}, {hi}]"), passed });
    }
    if checks.monotone {
        let bad = table.non_monotone.len() as f64;
        out.outcome.checks.push(Check::at_most("non_monotone_rows", bad, 0.0));
    }
    if let Some(last) = table.rows.last() {
        out.outcome.note("final_error", last.error);
        out.outcome.limit("final_error", last.error, checks.final_error);
    }
    if let Some(last) = table.rows.last() {
        out.outcome.limit("norm_drift", (last.norm / psi0.norm() - 1.0).abs(), checks.norm_drift);
    }
    Ok(())
}

/// Configured points snapped to the phase-space grid.
fn grid_points(v: &Validated) -> Vec<(usize, usize)> {
    let pts = v.scenario.points.as_ref().expect("checked by requirements");
    let g = v.grid;
    pts.q.iter().flat_map(|q| pts.p.iter().map(move |p| (g.nearest_q_index(*q), g.nearest_p_index(*p)))).collect()
}

fn pathint(v: &Validated, out: &mut Out) -> Result<()> {
    let part = &v.schedule[0];
    let g = v.grid;
    let f = &v.hamiltonian;
    let spec = QuadratureSpec::new(g);
    let iterated = iterated_compose_symbol(f, part, &g, &Window::standard(&g))?;
    let product = product_symbol_oracle(f, part, &g)?;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for (j, k) in grid_points(v) {
        let (q, p) = (g.q(j), g.p(k));
        let est = multiple_integral_symbol(f, part, q, p, &spec)?;
        let (a, b, c) = (est.value, iterated.at(j, k), product.at(j, k));
        let d = (a - b).norm().max((a - c).norm()).max((b - c).norm());
        worst = worst.max(d);
        rows.push(vec![q, p, a.re, a.im, b.re, b.im, c.re, c.im, d]);
    }
    let header = ["q", "p", "integral_re", "integral_im", "iterated_re", "iterated_im", "product_re", "product_im", "max_diff"];
    out.csv("pathint.csv", &header, rows)?;
    out.outcome.note("slices", part.len());
    out.outcome.note("max_diff", worst);
    out.outcome.limit("triangle", worst, v.scenario.checks.max_diff);
    Ok(())
}

fn geodesic(v: &Validated, out: &mut Out) -> Result<()> {
    let chart = v.chart.as_ref().expect("checked by requirements");
    let gd = v.scenario.geodesic.as_ref().expect("checked by requirements");
    let path = chart.geodesic(&gd.base, &gd.velocity, gd.samples)?;
    let d = chart.dim();
    let mut header = vec!["tau".to_string()];
    header.extend((0..d).map(|i| format!("q{}", i + 1)));
    header.extend((0..d).map(|i| format!("qdot{}", i + 1)));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv(
        "geodesic.csv",
        &header,
        path.samples.iter().map(|s| std::iter::once(s.tau).chain(s.q.iter().copied()).chain(s.qdot.iter().copied()).collect()),
    )?;
    let back = chart.log_map(&gd.base, path.end())?;
    let round_trip = back.iter().zip(&gd.velocity).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let drift = path.speed_drift(chart);
    out.outcome.note("round_trip", round_trip);
    out.outcome.note("speed_drift", drift);
    out.outcome.note("error_estimate", path.error_estimate);
    out.outcome.limit("log_exp_round_trip", round_trip, v.scenario.checks.max_diff);
    out.outcome.limit("speed_drift", drift, v.scenario.checks.max_diff);
    Ok(())
}

fn covsym(v: &Validated, out: &mut Out) -> Result<()> {
    let chart = v.chart.clone().expect("checked at load");
    let cfg = v.scenario.covsym.as_ref().expect("checked by requirements");
    let line = Arc::new(LineChart::new(chart)?);
    let nbhd = cfg.radius.map(NormalNeighborhood::uniform);
    if v.scenario.oracle.kind == OracleKind::LaplaceBeltrami {
        return curved_covsym(v, &line, out);
    }
    // flat reduction: the grid kernel of the Weyl-quantized f read on the chart
    let (lo, hi) = line.domain();
    for q in [lo, 0.5 * (lo + hi), hi] {
        if (line.sqrt_g(q) - 1.0).abs() > 1e-12 || line.gamma(q).abs() > 1e-12 {
            return Err(ConfigError::Invalid { key: "chart.metric".into(), message: "flat reduction needs a Euclidean chart".into() }.into());
        }
    }
    let g = v.grid;
    let op = weyl_quantize(&sampled_symbol(v, OmegaRule::Weyl))?;
    let kernel = ManifoldKernel::from_flat(&op)?;
    if let Some(n) = &nbhd {
        let (_, report) = window_proper(&kernel, n);
        out.outcome.note("tapered_fraction", report.tapered_fraction);
        out.outcome.note("off_mass", report.off_mass);
        out.outcome.limit("off_neighborhood_mass", report.off_mass, Some(1e-10));
    }
    let flat_weyl = weyl_dequantize(&op);
    let flat_std = standard_symbol_of(&op);
    let pts = grid_points(v);
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for (j, k) in pts {
        let (q, p) = (g.q(j), g.p(k));
        let cw = covariant_weyl_symbol(&kernel, &[q], &[p])?.values[0];
        let cs = covariant_standard_symbol(&kernel, &[q], &[p])?.values[0];
        let (fw, fs) = (flat_weyl.at(j, k), flat_std.at(j, k));
        let (dw, ds) = ((cw - fw).norm(), (cs - fs).norm());
        worst = worst.max(dw).max(ds);
        rows.push(vec![q, p, fw.re, fw.im, cw.re, cw.im, dw, fs.re, fs.im, cs.re, cs.im, ds]);
    }
    let header = [
        "q", "p", "flat_weyl_re", "flat_weyl_im", "cov_weyl_re", "cov_weyl_im", "weyl_diff", "flat_std_re", "flat_std_im",
        "cov_std_re", "cov_std_im", "std_diff",
    ];
    out.csv("flat_reduction.csv", &header, rows)?;
    out.outcome.note("max_diff", worst);
    out.outcome.limit("flat_reduction", worst, v.scenario.checks.max_diff);
    Ok(())
}

/// Slice integral of the kinetic Hamiltonian of the chart against resolvent
/// products of its Laplace-Beltrami operator. `hamiltonian.f` is not used.
fn curved_covsym(v: &Validated, line: &Arc<LineChart>, out: &mut Out) -> Result<()> {
    let cg = v.chart_grid.expect("checked at load");
    let part = &v.schedule[0];
    let hbar = v.scenario.hbar;
    let oracle = resolvent_product_oracle(line, cg, hbar, part)?;
    let kinetic = kinetic_hamiltonian(line, hbar)?;
    let opts = v.slice_options.expect("checked at load");
    let pts = v.scenario.points.as_ref().expect("checked by requirements");
    let qs: Vec<f64> = pts.q.iter().map(|q| cg.node(cg.nearest(*q))).collect();
    let sym = covariant_standard_symbol(&oracle, &qs, &pts.p)?;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, q) in qs.iter().enumerate() {
        for (m, p) in pts.p.iter().enumerate() {
            let c = covariant_slice_integral(line, &kinetic, part, *q, *p, &opts)?;
            let o = sym.at(i, m);
            let d = (c - o).norm();
            worst = worst.max(d);
            rows.push(vec![*q, *p, c.re, c.im, o.re, o.im, d]);
        }
    }
    out.csv("slice_integral.csv", &["q", "p", "integral_re", "integral_im", "oracle_re", "oracle_im", "diff"], rows)?;
    let spec = v.scenario.chart.as_ref().expect("checked at load");
    out.write("oracle_symbol.bin", &dump::encode_covariant(spec, (cg.lo, cg.hi, cg.n), hbar, &sym))?;
    out.outcome.note("max_diff", worst);
    out.outcome.limit("operator_product", worst, v.scenario.checks.max_diff);
    Ok(())
}

fn semiclassical(v: &Validated, out: &mut Out) -> Result<()> {
    let f = &v.hamiltonian;
    let part = v.schedule.last().expect("checked by requirements");
    let pts = v.scenario.points.as_ref().expect("checked by requirements");
    let (t1, dt1) = part.slices().next().expect("partitions have a slice");
    let mut rows = Vec::new();
    let (mut worst, mut grad): (f64, f64) = (0.0, 0.0);
    let mut index = 0.0;
    for q in &pts.q {
        for p in &pts.p {
            let sp = stationary_path(f, part, *q, *p, SliceAction::Plain)?;
            let q1 = sp.path.q[1];
            let q_start = q1 - dt1 * f.partial(0, 1, t1, q1, *p).re;
            let be = backward_euler_hamilton(f, part, q_start, *p)?;
            let nsl = part.len();
            for n in 0..=nsl {
                let (bq, bp) = if n == 0 { (*q, *p) } else { (be.q[n], be.p[n]) };
                // p_N is pinned to p on the closed path; the recursion leaves it free
                if n > 0 {
                    worst = worst.max((bq - sp.path.q[n]).abs());
                }
                if n > 0 && n < nsl {
                    worst = worst.max((bp - sp.path.p[n]).abs());
                }
                rows.push(vec![index, n as f64, part.times()[n], sp.path.q[n], sp.path.p[n], bq, bp]);
            }
            grad = grad.max(sp.gradient);
            index += 1.0;
        }
    }
    out.csv("paths.csv", &["point", "n", "t", "q", "p", "euler_q", "euler_p"], rows)?;
    out.outcome.note("max_diff", worst);
    out.outcome.note("gradient", grad);
    out.outcome.limit("stationary_vs_euler", worst, v.scenario.checks.max_diff);
    out.outcome.limit("action_gradient", grad, v.scenario.checks.gradient);
    Ok(())
}

fn validate(v: &Validated, out: &mut Out, seed: u64) -> Result<()> {
    let opts = DiagnoseOptions { seed, ..DiagnoseOptions::default() };
    let report = diagnose(&v.hamiltonian, &v.grid, &opts);
    out.csv(
        "diagnostics.csv",
        &["alpha_q", "alpha_p", "c1", "c2", "c4", "diverging"],
        report.bounds.iter().map(|b| {
            let [c1, c2, c4] = b.constants;
            vec![b.alpha.0 as f64, b.alpha.1 as f64, c1, c2, c4, b.diverging as u8 as f64]
        }),
    )?;
    out.outcome.note("delta", report.delta);
    out.outcome.note("quasi_polynomial", report.quasi_polynomial);
    out.outcome.note("t_continuous", report.t_continuous);
    out.outcome.note("derivative_mismatch", report.derivative_mismatch);
    out.outcome.note("non_finite_samples", report.non_finite.len());
    if let Some(expect) = v.scenario.checks.quasi_polynomial {
        let passed = report.quasi_polynomial == expect;
        let value = report.quasi_polynomial as u8 as f64;
        out.outcome.checks.push(Check { name: "quasi_polynomial".into(), value, limit: format!("== {expect}"), passed });
    }
    Ok(())
}

/// Writes `value` as one JSON line.
pub fn emit_json(mut w: impl Write, value: &Value) {
    let _ = writeln!(w, "{value}");
}
