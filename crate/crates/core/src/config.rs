//! Scenario files: TOML with one table per concern. Expressions are quoted
//! strings in the grammar of [`crate::expr`].
//!
//! ```toml
//! name = "oscillator"
//! hbar = 1.0
//!
//! [grid]
//! q_min = -12.0
//! q_max = 12.0
//! n = 256
//!
//! [hamiltonian]
//! f = "(p^2 + q^2)/2"
//!
//! [partition]
//! t1 = 1.0
//! slices = [16, 32, 64]
//! ```
//!
//! Parsing checks every value before anything runs; errors name the
//! offending key as a dotted path.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::covsym::{ChartGrid, CovectorRule, SliceIntegralOptions, SliceSymbol, KMAX};
use crate::geom::{ChartSpec, ManifoldChart};
use crate::slicer::Partition;
use crate::symcalc::{OmegaRule, PhaseGrid, QuasiHamiltonian};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("`{key}`: {message}")]
    Parse { key: String, message: String },
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    pub fn key(&self) -> &str {
        match self {
            ConfigError::Parse { key, .. } | ConfigError::Invalid { key, .. } => key,
        }
    }

    fn invalid(key: &str, message: impl ToString) -> Self {
        ConfigError::Invalid { key: key.into(), message: message.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub q_min: f64,
    pub q_max: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    #[default]
    Weyl,
    Standard,
    Wick,
    S,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleConfig {
    #[serde(default)]
    pub kind: RuleKind,
    /// Parameter of `kind = "s"`.
    pub s: Option<f64>,
    /// `Omega(q, p)` of `kind = "custom"`.
    pub omega: Option<String>,
    #[serde(default)]
    pub certified_nonzero: bool,
}

impl RuleConfig {
    fn build(&self, key: &str) -> Result<OmegaRule> {
        match self.kind {
            RuleKind::Weyl => Ok(OmegaRule::Weyl),
            RuleKind::Standard => Ok(OmegaRule::Standard),
            RuleKind::Wick => Ok(OmegaRule::Wick),
            RuleKind::S => {
                let s = self.s.ok_or_else(|| ConfigError::invalid(&format!("{key}.s"), "required for kind = \"s\""))?;
                OmegaRule::sparam(s).map_err(|e| ConfigError::invalid(&format!("{key}.s"), e))
            }
            RuleKind::Custom => {
                let text = self
                    .omega
                    .as_deref()
                    .ok_or_else(|| ConfigError::invalid(&format!("{key}.omega"), "required for kind = \"custom\""))?;
                OmegaRule::custom(text, self.certified_nonzero).map_err(|e| ConfigError::invalid(&format!("{key}.omega"), e))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianConfig {
    /// Scalar `f(t, q, p)`.
    pub f: Option<String>,
    /// Row-major matrix entries, instead of `f`.
    pub entries: Option<Vec<String>>,
    /// Growth order `m`.
    #[serde(default = "two")]
    pub order: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default)]
    pub t0: f64,
    pub t1: f64,
    /// Slice counts, one uniform partition each; increasing for `converge`.
    pub slices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketConfig {
    #[serde(default)]
    pub q0: f64,
    #[serde(default = "one")]
    pub width: f64,
    #[serde(default)]
    pub k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    /// Exact evolution of the quantized time-independent Hamiltonian.
    #[default]
    Spectral,
    /// Closed-form free evolution.
    Free,
    /// Differences of consecutive refinements.
    Cauchy,
    /// Resolvent products of the Laplace-Beltrami operator on a chart.
    LaplaceBeltrami,
    None,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default)]
    pub kind: OracleKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointsConfig {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovectorConfig {
    #[default]
    Transport,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovsymConfig {
    /// Chart grid nodes; the span defaults to the chart domain.
    pub nodes: usize,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    /// Momentum extent of the slice integral; defaults to `2 pi hbar / dq`,
    /// the largest value that does not alias.
    pub p_extent: Option<f64>,
    #[serde(default = "default_dp")]
    pub dp: f64,
    #[serde(default)]
    pub covector: CovectorConfig,
    /// Order of the covariant series for slice symbols; 0 keeps the
    /// principal symbol.
    #[serde(default)]
    pub series_order: usize,
    /// Normal-neighborhood radius used to window kernels.
    pub radius: Option<f64>,
}

fn default_dp() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeodesicConfig {
    pub base: Vec<f64>,
    pub velocity: Vec<f64>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_samples() -> usize {
    64
}

/// Thresholds checked after a run; absent ones are not checked.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksConfig {
    /// Accepted range of the fitted convergence order.
    pub order: Option<[f64; 2]>,
    pub final_error: Option<f64>,
    pub max_diff: Option<f64>,
    /// Largest relative norm change.
    pub norm_drift: Option<f64>,
    #[serde(default)]
    pub monotone: bool,
    /// Largest action gradient at stationary paths.
    pub gradient: Option<f64>,
    /// Expected quasi-polynomial verdict of the diagnostics.
    pub quasi_polynomial: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "one")]
    pub hbar: f64,
    pub seed: Option<u64>,
    pub grid: GridConfig,
    #[serde(default)]
    pub rule: RuleConfig,
    /// Destination rule of `transform`.
    pub target: Option<RuleConfig>,
    pub hamiltonian: HamiltonianConfig,
    pub partition: Option<PartitionConfig>,
    pub packet: Option<PacketConfig>,
    #[serde(default)]
    pub oracle: OracleConfig,
    pub chart: Option<ChartSpec>,
    pub points: Option<PointsConfig>,
    pub covsym: Option<CovsymConfig>,
    pub geodesic: Option<GeodesicConfig>,
    #[serde(default)]
    pub checks: ChecksConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// A scenario with every expression parsed and every value checked.
#[derive(Debug, Clone)]
pub struct Validated {
    pub scenario: Scenario,
    pub grid: PhaseGrid,
    pub rule: OmegaRule,
    pub target: Option<OmegaRule>,
    pub hamiltonian: QuasiHamiltonian,
    pub schedule: Vec<Partition>,
    pub chart: Option<ManifoldChart>,
    pub chart_grid: Option<ChartGrid>,
    pub covector: CovectorRule,
    pub slice_symbol: SliceSymbol,
    /// Resolved `[covsym]` settings of the slice integral.
    pub slice_options: Option<SliceIntegralOptions>,
    /// SHA-256 of the scenario text, hex.
    pub hash: String,
}

/// SHA-256 of `bytes` as lowercase hex.
pub fn content_hash(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

impl Scenario {
    /// Parses TOML; unknown keys and type errors are reported with their path.
    pub fn parse(text: &str) -> Result<Scenario> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.message().to_string();
            let key = if key == "." { unknown_key(&message).unwrap_or(key) } else { key };
            ConfigError::Parse { key, message }
        })
    }

    /// Parses and validates.
    pub fn load(text: &str) -> Result<Validated> {
        Self::parse(text)?.validate(content_hash(text.as_bytes()))
    }

    pub fn validate(self, hash: String) -> Result<Validated> {
        if self.name.trim().is_empty() {
            return Err(ConfigError::invalid("name", "must not be empty"));
        }
        if !(self.hbar.is_finite() && self.hbar > 0.0) {
            return Err(ConfigError::invalid("hbar", format!("{} must be positive", self.hbar)));
        }
        let g = &self.grid;
        let grid = PhaseGrid::new(g.q_min, g.q_max, g.n, self.hbar).map_err(|e| {
            let key = if !(g.n >= 8 && g.n.is_power_of_two()) { "grid.n" } else { "grid.q_max" };
            ConfigError::invalid(key, e)
        })?;
        let rule = self.rule.build("rule")?;
        let target = self.target.as_ref().map(|t| t.build("target")).transpose()?;
        let hamiltonian = self.build_hamiltonian()?;
        let schedule = match &self.partition {
            None => vec![],
            Some(p) => {
                if !(p.t1 > p.t0) {
                    return Err(ConfigError::invalid("partition.t1", format!("{} must exceed t0 = {}", p.t1, p.t0)));
                }
                if p.slices.is_empty() {
                    return Err(ConfigError::invalid("partition.slices", "needs at least one slice count"));
                }
                p.slices
                    .iter()
                    .enumerate()
                    .map(|(i, n)| {
                        Partition::uniform(p.t0, p.t1, *n)
                            .map_err(|e| ConfigError::invalid(&format!("partition.slices[{i}]"), e))
                    })
                    .collect::<Result<_>>()?
            }
        };
        if let Some(pk) = &self.packet {
            if !(pk.width > 0.0 && pk.width.is_finite()) {
                return Err(ConfigError::invalid("packet.width", "must be positive"));
            }
        }
        if let Some(pts) = &self.points {
            if pts.q.is_empty() || pts.p.is_empty() {
                return Err(ConfigError::invalid("points", "needs at least one q and one p"));
            }
        }
        let chart = match &self.chart {
            None => None,
            Some(spec) => Some(ManifoldChart::new(spec).map_err(|e| ConfigError::invalid("chart", e))?),
        };
        let mut chart_grid = None;
        let mut covector = CovectorRule::Transport;
        let mut slice_symbol = SliceSymbol::Principal;
        let mut slice_options = None;
        if let Some(c) = &self.covsym {
            let chart = chart.as_ref().ok_or_else(|| ConfigError::invalid("chart", "required by [covsym]"))?;
            if chart.dim() != 1 {
                return Err(ConfigError::invalid("chart.domain", "covariant symbols need a one-dimensional chart"));
            }
            let (dlo, dhi) = chart.domain()[0];
            let (lo, hi) = (c.lo.unwrap_or(dlo), c.hi.unwrap_or(dhi));
            if lo < dlo || hi > dhi {
                return Err(ConfigError::invalid("covsym.lo", format!("[{lo}, {hi}] leaves the chart domain")));
            }
            let cg = ChartGrid::new(lo, hi, c.nodes).map_err(|e| ConfigError::invalid("covsym.nodes", e))?;
            let limit = 2.0 * std::f64::consts::PI * self.hbar / cg.dq();
            let p_extent = c.p_extent.unwrap_or(limit);
            if !(p_extent > 0.0 && p_extent <= limit) {
                return Err(ConfigError::invalid("covsym.p_extent", format!("{p_extent} outside (0, 2 pi hbar / dq = {limit}]")));
            }
            if !(c.dp > 0.0 && c.dp < p_extent) {
                return Err(ConfigError::invalid("covsym.dp", "need 0 < dp < p_extent"));
            }
            chart_grid = Some(cg);
            if c.series_order > KMAX {
                return Err(ConfigError::invalid("covsym.series_order", format!("at most {KMAX}")));
            }
            covector = match c.covector {
                CovectorConfig::Transport => CovectorRule::Transport,
                CovectorConfig::Identity => CovectorRule::Identity,
            };
            slice_symbol = match c.series_order {
                0 => SliceSymbol::Principal,
                k => SliceSymbol::Corrected(k),
            };
            slice_options = Some(SliceIntegralOptions { grid: cg, p_extent, dp: c.dp, covector, symbol: slice_symbol });
        }
        if let (Some(gd), Some(chart)) = (&self.geodesic, &chart) {
            if gd.base.len() != chart.dim() {
                return Err(ConfigError::invalid("geodesic.base", format!("needs {} components", chart.dim())));
            }
            if gd.velocity.len() != chart.dim() {
                return Err(ConfigError::invalid("geodesic.velocity", format!("needs {} components", chart.dim())));
            }
        }
        if let Some([lo, hi]) = self.checks.order {
            if !(lo <= hi) {
                return Err(ConfigError::invalid("checks.order", "range must be increasing"));
            }
        }
        Ok(Validated {
            grid,
            rule,
            target,
            hamiltonian,
            schedule,
            chart,
            chart_grid,
            covector,
            slice_symbol,
            slice_options,
            hash,
            scenario: self,
        })
    }

    fn build_hamiltonian(&self) -> Result<QuasiHamiltonian> {
        let h = &self.hamiltonian;
        let (entries, key): (Vec<&str>, &str) = match (&h.f, &h.entries) {
            (Some(f), None) => (vec![f.as_str()], "hamiltonian.f"),
            (None, Some(e)) => (e.iter().map(String::as_str).collect(), "hamiltonian.entries"),
            _ => return Err(ConfigError::invalid("hamiltonian", "give exactly one of `f` and `entries`")),
        };
        QuasiHamiltonian::new(&entries, h.order, self.hbar).map_err(|e| {
            let key = if !(h.order.is_finite() && h.order > 0.0) { "hamiltonian.order" } else { key };
            ConfigError::invalid(key, e)
        })
    }
}

fn unknown_key(message: &str) -> Option<String> {
    let start = message.find("unknown field `")? + "unknown field `".len();
    let end = message[start..].find('`')?;
    Some(message[start..start + end].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
name = "osc"
[grid]
q_min = -8.0
q_max = 8.0
n = 64
[hamiltonian]
f = "(p^2 + q^2)/2"
[partition]
t1 = 1.0
slices = [4, 8]
"#;

    #[test]
    fn parses_and_validates() {
        let v = Scenario::load(BASE).unwrap();
        assert_eq!(v.grid.n(), 64);
        assert_eq!(v.schedule.len(), 2);
        assert_eq!(v.rule, OmegaRule::Weyl);
        assert_eq!(v.hash.len(), 64);
        assert_eq!(v.hash, Scenario::load(BASE).unwrap().hash);
    }

    fn key_of(text: &str) -> String {
        Scenario::load(text).unwrap_err().key().to_string()
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(&BASE.replace("n = 64", "n = 60")), "grid.n");
        assert_eq!(key_of(&BASE.replace("n = 64", "n = \"many\"")), "grid.n");
        assert_eq!(key_of(&BASE.replace("q_max = 8.0", "q_max = 8.0\nwidth = 2")), "grid.width");
        assert_eq!(key_of(&BASE.replace("(p^2 + q^2)/2", "p^2 + x")), "hamiltonian.f");
        assert_eq!(key_of(&BASE.replace("t1 = 1.0", "t1 = -1.0")), "partition.t1");
        assert_eq!(key_of(&BASE.replace("[4, 8]", "[4, 0]")), "partition.slices[1]");
        assert_eq!(key_of(&format!("{BASE}[rule]\nkind = \"s\"\n")), "rule.s");
        assert_eq!(key_of(&format!("{BASE}[rule]\nkind = \"fancy\"\n")), "rule.kind");
        let chart = "[chart]\nmetric = [\"-1\"]\ndomain = [[0.0, 1.0]]\n";
        assert_eq!(key_of(&format!("{BASE}{chart}")), "chart");
        assert!(Scenario::parse("name = ").is_err());
    }

    #[test]
    fn covsym_section_needs_a_chart() {
        let text = format!("{BASE}[covsym]\nnodes = 101\n");
        assert_eq!(key_of(&text), "chart");
        let text = format!("{text}[chart]\nmetric = [\"exp(2*q)\"]\ndomain = [[-1.0, 1.0]]\n");
        let v = Scenario::load(&text).unwrap();
        assert_eq!(v.chart_grid.unwrap().n, 101);
        let limit = 2.0 * std::f64::consts::PI / 0.02;
        assert!((v.slice_options.unwrap().p_extent - limit).abs() < 1e-9);
        let wide = text.replace("nodes = 101", "nodes = 101\np_extent = 400.0");
        assert_eq!(key_of(&wide), "covsym.p_extent");
    }
}
