use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use pathslice::config::{ConfigError, Scenario, Validated};
use rayon::prelude::*;
use pathslice_cli::{emit_json, requirements, run, Command, RunError};

/// Run a pathslice scenario.
#[derive(Debug, Parser)]
#[command(name = "pathslice", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Scenario file (TOML); repeat to run a batch concurrently.
    #[arg(long, required = true)]
    scenario: Vec<PathBuf>,
    /// Output directory; defaults to `output.dir` or `out/<name>`. In a
    /// batch each scenario writes to `<out>/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate the scenario for the command without running it.
    #[arg(long)]
    check: bool,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = std::env::var("PATHSLICE_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    // every scenario is validated before any of them runs
    let mut loaded = Vec::new();
    for path in &args.scenario {
        match load(args.command, path) {
            Ok(v) => loaded.push(v),
            Err(e) => return fail(&e),
        }
    }
    let batch = loaded.len() > 1;
    let dirs: Vec<PathBuf> = loaded.iter().map(|v| out_dir(&args, v, batch)).collect();
    let mut seen = HashSet::new();
    if let Some(d) = dirs.iter().find(|d| !seen.insert(d.as_path())) {
        let e = ConfigError::Invalid { key: "output.dir".into(), message: format!("{} is shared by two scenarios", d.display()) };
        return fail(&e.into());
    }
    if args.check {
        for v in &loaded {
            emit_json(std::io::stdout(), &json!({"scenario": v.scenario.name, "command": args.command.name(), "valid": true}));
        }
        return ExitCode::SUCCESS;
    }
    let results: Vec<Result<bool, RunError>> =
        loaded.par_iter().zip(&dirs).map(|(v, dir)| execute(&args, v, dir)).collect();
    let mut code = 0;
    for r in results {
        match r {
            Ok(true) => {}
            Ok(false) => code = code.max(1),
            Err(e) => {
                emit_json(std::io::stderr(), &e.to_json());
                code = code.max(e.exit_code());
            }
        }
    }
    ExitCode::from(code as u8)
}

fn fail(e: &RunError) -> ExitCode {
    emit_json(std::io::stderr(), &e.to_json());
    ExitCode::from(e.exit_code() as u8)
}

fn load(cmd: Command, path: &Path) -> Result<Validated, RunError> {
    let text = std::fs::read_to_string(path).map_err(|source| RunError::Io { path: path.to_path_buf(), source })?;
    let v = Scenario::load(&text)?;
    requirements(cmd, &v)?;
    Ok(v)
}

fn out_dir(args: &Args, v: &Validated, batch: bool) -> PathBuf {
    match (&args.out, &v.scenario.output.dir) {
        (Some(o), _) if batch => o.join(&v.scenario.name),
        (Some(o), _) => o.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => PathBuf::from("out").join(&v.scenario.name),
    }
}

fn execute(args: &Args, v: &Validated, dir: &Path) -> Result<bool, RunError> {
    let seed = args.seed.or(v.scenario.seed).unwrap_or(0);
    let outcome = run(args.command, v, dir, seed)?;
    let checks: Vec<_> = outcome.checks.iter().map(|c| json!({"name": c.name, "value": c.value, "passed": c.passed})).collect();
    emit_json(
        std::io::stdout(),
        &json!({"scenario": v.scenario.name, "command": args.command.name(), "out": dir.display().to_string(), "checks": checks, "passed": outcome.passed()}),
    );
    Ok(outcome.passed())
}
