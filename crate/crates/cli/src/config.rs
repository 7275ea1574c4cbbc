//! Experiment configuration: one JSON document per run.
//!
//! Domains, generators, payoffs and paths are declared in named blocks and
//! referenced by name from `params`, whose shape depends on the experiment kind.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ppde_lab::lattice::ReducedPayoff;
use ppde_lab::{ClosureMode, ConvexDomain, GeneratorSpec, PathJson, PiecewisePath};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ExitTime,
    Frechet,
    PriceUvm,
    PerronSweep,
    ModulusProbe,
    ViscosityAudit,
    AssumptionsCheck,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::ExitTime,
        ExperimentKind::Frechet,
        ExperimentKind::PriceUvm,
        ExperimentKind::PerronSweep,
        ExperimentKind::ModulusProbe,
        ExperimentKind::ViscosityAudit,
        ExperimentKind::AssumptionsCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::ExitTime => "exit-time",
            ExperimentKind::Frechet => "frechet",
            ExperimentKind::PriceUvm => "price-uvm",
            ExperimentKind::PerronSweep => "perron-sweep",
            ExperimentKind::ModulusProbe => "modulus-probe",
            ExperimentKind::ViscosityAudit => "viscosity-audit",
            ExperimentKind::AssumptionsCheck => "assumptions-check",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The whole document; `P` is the kind-specific parameter block.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile<P> {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Output directory, relative to the config file.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub domains: BTreeMap<String, ConvexDomain>,
    #[serde(default)]
    pub generators: BTreeMap<String, GeneratorConfig>,
    #[serde(default)]
    pub payoffs: BTreeMap<String, PayoffConfig>,
    #[serde(default)]
    pub paths: BTreeMap<String, PathSource>,
    pub params: P,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    GUpper {
        #[serde(default = "one")]
        dim: usize,
        lip: f64,
        #[serde(default)]
        bound: f64,
    },
    GLower {
        #[serde(default = "one")]
        dim: usize,
        lip: f64,
        #[serde(default)]
        bound: f64,
    },
    Uvm {
        rate: f64,
        #[serde(default)]
        drift_bound: f64,
        sigma_lo: f64,
        sigma_hi: f64,
        #[serde(default)]
        bound: Option<f64>,
    },
    Linear {
        rate: f64,
        drift: f64,
        vol_sq: f64,
        source: f64,
    },
}

fn one() -> usize {
    1
}

impl GeneratorConfig {
    pub fn build(&self) -> ppde_lab::Result<GeneratorSpec> {
        match *self {
            GeneratorConfig::GUpper { dim, lip, bound } => GeneratorSpec::g_upper(dim, lip, bound),
            GeneratorConfig::GLower { dim, lip, bound } => GeneratorSpec::g_lower(dim, lip, bound),
            GeneratorConfig::Uvm {
                rate,
                drift_bound,
                sigma_lo,
                sigma_hi,
                bound,
            } => {
                let g = GeneratorSpec::uvm(rate, drift_bound, sigma_lo, sigma_hi)?;
                match bound {
                    Some(b) => g.with_bound(b),
                    None => Ok(g),
                }
            }
            GeneratorConfig::Linear {
                rate,
                drift,
                vol_sq,
                source,
            } => GeneratorSpec::linear(rate, drift, vol_sq, source),
        }
    }
}

/// Path functionals `ξ`, reduced to (final value, running state).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffConfig {
    Constant { value: f64 },
    /// Linear in the final value through `(lo, v_lo)` and `(hi, v_hi)`.
    BoundaryValues { lo: f64, hi: f64, v_lo: f64, v_hi: f64 },
    Linear { slope: f64, intercept: f64 },
    /// `a x² + b x + c`.
    Quadratic { a: f64, b: f64, c: f64 },
    Call { strike: f64 },
    Put { strike: f64 },
    /// `sup_t |ω_t|`.
    MaxAbs,
    /// `(sup_t ω_t − strike)⁺`.
    Lookback {
        #[serde(default)]
        strike: f64,
    },
}

impl PayoffConfig {
    pub fn build(&self) -> ReducedPayoff {
        match *self {
            PayoffConfig::Constant { value } => ReducedPayoff::constant(value),
            PayoffConfig::BoundaryValues { lo, hi, v_lo, v_hi } => {
                ReducedPayoff::boundary_values(lo, hi, v_lo, v_hi)
            }
            PayoffConfig::Linear { slope, intercept } => {
                ReducedPayoff::markovian("linear", move |x| slope * x[0] + intercept)
            }
            PayoffConfig::Quadratic { a, b, c } => {
                ReducedPayoff::markovian("quadratic", move |x| a * x[0] * x[0] + b * x[0] + c)
            }
            PayoffConfig::Call { strike } => ReducedPayoff::markovian("call", move |x| (x[0] - strike).max(0.0)),
            PayoffConfig::Put { strike } => ReducedPayoff::markovian("put", move |x| (strike - x[0]).max(0.0)),
            PayoffConfig::MaxAbs => ReducedPayoff::max_abs("max_abs", |m| m),
            PayoffConfig::Lookback { strike } => {
                ReducedPayoff::running_max("lookback", move |_, m| (m - strike).max(0.0))
            }
        }
    }
}

/// A path given inline, as 1-d breakpoints `[[t, x], ...]`, or in a JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PathSource {
    Inline(PathJson),
    Points(Vec<(f64, f64)>),
    File { file: PathBuf },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Closure {
    #[default]
    Canonical,
    Tight,
}

impl From<Closure> for ClosureMode {
    fn from(c: Closure) -> Self {
        match c {
            Closure::Canonical => ClosureMode::Canonical,
            Closure::Tight => ClosureMode::Tight,
        }
    }
}

fn default_profile_points() -> usize {
    21
}

fn default_mesh() -> f64 {
    1e-3
}

fn default_checkpoints() -> Vec<f64> {
    vec![0.05, 0.1, 0.2, 0.4]
}

fn default_membership_tol() -> f64 {
    1e-10
}

fn default_grid_n() -> usize {
    11
}

fn default_level() -> f64 {
    1.0
}

fn default_half_width() -> (f64, f64) {
    (0.5, 1.0)
}

fn default_samples() -> usize {
    1000
}

/// Monte Carlo settings; any block that carries one makes the run stochastic.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McParams {
    pub n_paths: usize,
    pub dt: f64,
}

/// `sup_P E[h_D]` for `D = (−r, r)` under the canonical control set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitTimeParams {
    pub lip: f64,
    pub radius: f64,
    pub h: f64,
    #[serde(default = "default_profile_points")]
    pub profile_points: usize,
    #[serde(default)]
    pub mc: Option<McParams>,
    /// Allowed change of DP outputs between runs.
    #[serde(default)]
    pub dp_tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrechetParams {
    pub a: String,
    pub b: String,
    #[serde(default = "default_mesh")]
    pub mesh: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceUvmParams {
    pub domain: String,
    pub generator: String,
    pub payoff: String,
    #[serde(default)]
    pub history: Option<String>,
    pub h: f64,
    /// Perron bracket, computed when `eps` is given.
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub m_list: Vec<usize>,
    #[serde(default)]
    pub closure: Closure,
    #[serde(default)]
    pub richardson: bool,
    pub mc: McParams,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<f64>,
    #[serde(default)]
    pub dp_tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerronSweepParams {
    pub domain: String,
    pub generator: String,
    pub payoff: String,
    #[serde(default)]
    pub history: Option<String>,
    pub eps: f64,
    pub h: f64,
    pub m_list: Vec<usize>,
    #[serde(default)]
    pub closure: Closure,
    #[serde(default)]
    pub richardson: bool,
    #[serde(default)]
    pub dp_tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// `sup_P E|h^{x} − h^{x+δ}|` under the canonical control set.
    Hitting,
    /// `|u(ω¹) − u(ω²)|` from two Perron sweeps.
    Perron,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulusProbeParams {
    pub mode: ProbeMode,
    pub domain: String,
    pub h: f64,
    /// Hitting mode: Lipschitz constant, base point and offsets.
    #[serde(default)]
    pub lip: Option<f64>,
    #[serde(default)]
    pub x: Option<f64>,
    #[serde(default)]
    pub deltas: Vec<f64>,
    /// Perron mode: generator, payoff and pairs of named histories.
    #[serde(default)]
    pub generator: Option<String>,
    #[serde(default)]
    pub payoff: Option<String>,
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub closure: Closure,
    #[serde(default)]
    pub pairs: Vec<(String, String)>,
    #[serde(default = "default_mesh")]
    pub mesh: f64,
    #[serde(default)]
    pub dp_tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViscosityAuditParams {
    pub domain: String,
    pub generator: String,
    pub payoff: String,
    /// Grid step of the pricing lattice.
    pub h: f64,
    /// Grid step of the membership test and the difference jet.
    pub audit_h: f64,
    pub eps: f64,
    pub histories: Vec<String>,
    #[serde(default = "default_grid_n")]
    pub grid_n: usize,
    #[serde(default = "default_half_width")]
    pub half_width: (f64, f64),
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_membership_tol")]
    pub membership_tol: f64,
    /// Defaults to `10 · audit_h`.
    #[serde(default)]
    pub generator_tol: Option<f64>,
    /// Added to the value at each audited history (a deliberately broken field).
    #[serde(default)]
    pub bump: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionsParams {
    pub generators: Vec<String>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

/// A parsed config with its origin.
#[derive(Debug, Clone)]
pub struct Loaded<P> {
    pub file: ConfigFile<P>,
    pub path: PathBuf,
    pub bytes: Vec<u8>,
}

impl<P: for<'de> Deserialize<'de>> Loaded<P> {
    pub fn read(path: &Path, kind: ExperimentKind) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| CliError::Config(format!("{}: not UTF-8: {e}", path.display())))?;
        // Check the kind first so that a config for another subcommand is not
        // reported as a params error.
        #[derive(Deserialize)]
        struct KindOnly {
            kind: ExperimentKind,
        }
        if let Ok(k) = serde_json::from_str::<KindOnly>(text) {
            if k.kind != kind {
                return Err(CliError::Config(format!(
                    "{}: config is for `{}` but the subcommand is `{kind}`",
                    path.display(),
                    k.kind
                )));
            }
        }
        let file: ConfigFile<P> = serde_json::from_str(text).map_err(|e| schema_error(path, &e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
            bytes,
        })
    }

    pub fn base_dir(&self) -> PathBuf {
        self.path.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    pub fn domain(&self, name: &str) -> Result<ConvexDomain, CliError> {
        let d = self
            .file
            .domains
            .get(name)
            .ok_or_else(|| unresolved("domain", name))?
            .clone();
        d.validate().map_err(|e| CliError::Config(format!("domain `{name}`: {e}")))?;
        Ok(d)
    }

    pub fn generator_config(&self, name: &str) -> Result<&GeneratorConfig, CliError> {
        self.file.generators.get(name).ok_or_else(|| unresolved("generator", name))
    }

    pub fn generator(&self, name: &str) -> Result<GeneratorSpec, CliError> {
        self.generator_config(name)?
            .build()
            .map_err(|e| CliError::Config(format!("generator `{name}`: {e}")))
    }

    pub fn payoff(&self, name: &str) -> Result<ReducedPayoff, CliError> {
        Ok(self.file.payoffs.get(name).ok_or_else(|| unresolved("payoff", name))?.build())
    }

    pub fn path(&self, name: &str) -> Result<PiecewisePath, CliError> {
        let src = self.file.paths.get(name).ok_or_else(|| unresolved("path", name))?;
        let bad = |e: ppde_lab::LabError| CliError::Config(format!("path `{name}`: {e}"));
        match src {
            PathSource::Inline(j) => PiecewisePath::from_json(j).map_err(bad),
            PathSource::Points(pts) => PiecewisePath::lin1(pts).map_err(bad),
            PathSource::File { file } => {
                let full = self.base_dir().join(file);
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| CliError::Config(format!("path `{name}`: {}: {e}", full.display())))?;
                let j: PathJson = serde_json::from_str(&text).map_err(|e| schema_error(&full, &e))?;
                PiecewisePath::from_json(&j).map_err(bad)
            }
        }
    }

    /// Named history, or the constant path at the origin.
    pub fn history(&self, name: Option<&str>, dim: usize) -> Result<PiecewisePath, CliError> {
        match name {
            Some(n) => self.path(n),
            None => Ok(PiecewisePath::zero(dim)),
        }
    }

    /// The effective seed; missing seeds are a config error.
    pub fn seed(&self, overridden: Option<u64>) -> Result<u64, CliError> {
        overridden.or(self.file.seed).ok_or_else(|| {
            CliError::Config(format!(
                "{}: `{}` is stochastic and needs a `seed` (or --seed)",
                self.path.display(),
                self.file.kind
            ))
        })
    }
}

/// Position-tagged parse error; serde's own " at line L column C" suffix is dropped.
pub(crate) fn schema_error(path: &Path, e: &serde_json::Error) -> CliError {
    let mut message = e.to_string();
    if let Some(i) = message.rfind(" at line ") {
        message.truncate(i);
    }
    CliError::Schema {
        path: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message,
    }
}

fn unresolved(what: &str, name: &str) -> CliError {
    CliError::Config(format!("unknown {what} `{name}`"))
}
