//! Run manifests and the comparison of two runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{schema_error, ExperimentKind};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Key outputs whose names start with this prefix are errors against an
/// exact oracle; `compare_runs` fits their convergence order in `h`.
pub const ORACLE_GAP_PREFIX: &str = "oracle_gap";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Deterministic: depends only on the config.
    Dp,
    /// Sampled: depends on the config and the seed.
    Mc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyOutput {
    pub name: String,
    pub value: f64,
    pub kind: OutputKind,
    /// Allowed change between runs of DP outputs.
    pub tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
}

impl KeyOutput {
    pub fn dp(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            kind: OutputKind::Dp,
            tolerance,
            std_error: None,
        }
    }

    pub fn mc(name: impl Into<String>, value: f64, std_error: f64) -> Self {
        Self {
            name: name.into(),
            value,
            kind: OutputKind::Mc,
            tolerance: 3.0 * std_error,
            std_error: Some(std_error),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ExperimentKind,
    pub config_file: String,
    pub config_sha256: String,
    pub seed: Option<u64>,
    /// Grid step of the run, when it has one.
    pub h: Option<f64>,
    pub versions: BTreeMap<String, String>,
    pub artifacts: Vec<ArtifactEntry>,
    pub key_outputs: Vec<KeyOutput>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| schema_error(path, &e))
    }

    pub fn output(&self, name: &str) -> Option<&KeyOutput> {
        self.key_outputs.iter().find(|k| k.name == name)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("ppde-lab".to_string(), ppde_lab::VERSION.to_string()),
        ("ppde-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ])
}

/// One key output that differs between the runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub name: String,
    pub kind: OutputKind,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub diff: Option<f64>,
    pub tolerance: f64,
    pub within: bool,
}

/// Observed order `log(gap_a / gap_b) / log(h_a / h_b)` of an oracle gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub name: String,
    pub h_a: f64,
    pub h_b: f64,
    pub gap_a: f64,
    pub gap_b: f64,
    pub order: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub kind: ExperimentKind,
    pub rows: Vec<DiffRow>,
    pub orders: Vec<OrderRow>,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() && self.orders.is_empty()
    }

    pub fn within_tolerance(&self) -> bool {
        self.rows.iter().all(|r| r.within)
    }

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("name,kind,a,b,diff,tolerance,within\n");
        for r in &self.rows {
            let kind = match r.kind {
                OutputKind::Dp => "dp",
                OutputKind::Mc => "mc",
            };
            out.push_str(&format!(
                "{},{kind},{},{},{},{},{}\n",
                r.name,
                f(r.a),
                f(r.b),
                f(r.diff),
                r.tolerance,
                r.within
            ));
        }
        out
    }
}

/// Key outputs that differ between two runs of the same kind. DP outputs
/// may move by the larger of the two configured tolerances, MC outputs by
/// `3 √(se_a² + se_b²)`; bit-identical outputs are omitted.
pub fn compare_runs(a: &Manifest, b: &Manifest) -> Result<DiffReport, CliError> {
    if a.kind != b.kind {
        return Err(CliError::KindMismatch { a: a.kind, b: b.kind });
    }
    let mut names: Vec<&str> = a.key_outputs.iter().map(|k| k.name.as_str()).collect();
    for k in &b.key_outputs {
        if a.output(&k.name).is_none() {
            names.push(&k.name);
        }
    }
    let mut rows = Vec::new();
    for name in names {
        match (a.output(name), b.output(name)) {
            (Some(x), Some(y)) => {
                if x.value.to_bits() == y.value.to_bits() {
                    continue;
                }
                let (kind, tolerance) = match (x.kind, y.kind) {
                    (OutputKind::Dp, OutputKind::Dp) => (OutputKind::Dp, x.tolerance.max(y.tolerance)),
                    _ => {
                        let (sa, sb) = (x.std_error.unwrap_or(0.0), y.std_error.unwrap_or(0.0));
                        (OutputKind::Mc, 3.0 * (sa * sa + sb * sb).sqrt())
                    }
                };
                let diff = y.value - x.value;
                rows.push(DiffRow {
                    name: name.to_string(),
                    kind,
                    a: Some(x.value),
                    b: Some(y.value),
                    diff: Some(diff),
                    tolerance,
                    within: diff.abs() <= tolerance,
                });
            }
            (x, y) => {
                let k = x.or(y).expect("name comes from one of the manifests");
                rows.push(DiffRow {
                    name: name.to_string(),
                    kind: k.kind,
                    a: x.map(|o| o.value),
                    b: y.map(|o| o.value),
                    diff: None,
                    tolerance: k.tolerance,
                    within: false,
                });
            }
        }
    }
    let mut orders = Vec::new();
    if let (Some(ha), Some(hb)) = (a.h, b.h) {
        if ha != hb {
            for x in a.key_outputs.iter().filter(|k| k.name.starts_with(ORACLE_GAP_PREFIX)) {
                let Some(y) = b.output(&x.name) else { continue };
                let (ga, gb) = (x.value.abs(), y.value.abs());
                if ga > 0.0 && gb > 0.0 {
                    orders.push(OrderRow {
                        name: x.name.clone(),
                        h_a: ha,
                        h_b: hb,
                        gap_a: ga,
                        gap_b: gb,
                        order: (ga / gb).ln() / (ha / hb).ln(),
                    });
                }
            }
        }
    }
    Ok(DiffReport { kind: a.kind, rows, orders })
}
