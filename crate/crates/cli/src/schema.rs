//! Column documentation written next to every run as `schema.json`.

use serde_json::{json, Value};

use crate::config::ExperimentKind;

fn csv(file: &str, columns: &[(&str, &str)]) -> Value {
    json!({
        "file": file,
        "format": "csv",
        "columns": columns.iter().map(|(n, d)| json!({"name": n, "description": d})).collect::<Vec<_>>(),
    })
}

fn doc(file: &str, description: &str) -> Value {
    json!({"file": file, "format": "json", "description": description})
}

const PERRON_DEPTHS: &[(&str, &str)] = &[
    ("m", "truncation depth of the skeleton tree"),
    ("upper", "upper envelope at the root point"),
    ("lower", "lower envelope at the root point"),
    ("gap", "upper minus lower at the root point"),
    ("root_field_gap", "sup norm of upper minus lower over the root's localized domain"),
    ("capacity", "capacity of m successive exits before leaving the domain"),
    ("leaf_gap", "largest closure gap over the depth-m leaves"),
    ("nodes", "number of skeleton nodes solved at this depth"),
];

const PERRON_NODES: &[(&str, &str)] = &[
    ("m", "truncation depth"),
    ("level", "depth of the node in the tree"),
    ("skeleton", "space-separated skeleton positions relative to the history's final value"),
    ("upper", "upper value at the node"),
    ("lower", "lower value at the node"),
];

/// Artifact and column descriptions for one experiment kind.
pub fn schema(kind: ExperimentKind) -> Value {
    let artifacts = match kind {
        ExperimentKind::ExitTime => vec![
            csv(
                "exit_time.csv",
                &[
                    ("x", "starting point in (-r, r)"),
                    ("closed_form", "exact sup_P E[h_D] from the closed form"),
                    ("dp", "lattice dynamic-programming value"),
                    ("mc", "Monte Carlo estimate under the extracted policy (empty at the boundary or without MC)"),
                    ("mc_se", "standard error of mc"),
                    ("dp_gap", "dp minus closed_form"),
                    ("mc_gap", "mc minus closed_form"),
                ],
            ),
            doc("summary.json", "values at the origin, oracle gaps and solver diagnostics"),
        ],
        ExperimentKind::Frechet => vec![doc(
            "distance.json",
            "distance between the two paths and their canonical forms",
        )],
        ExperimentKind::PriceUvm => vec![
            doc("price.json", "lattice price, Perron bracket, MC bounds and martingale checks"),
            csv(
                "value_field.csv",
                &[
                    ("x", "lattice node"),
                    ("aux", "auxiliary level (running maximum) or 0"),
                    ("value", "price field at the node"),
                ],
            ),
            csv(
                "policy.csv",
                &[
                    ("x", "lattice node"),
                    ("aux", "auxiliary level"),
                    ("drift", "optimal drift at the node"),
                    ("vol_sq", "optimal squared volatility at the node"),
                ],
            ),
            csv("perron_depths.csv", PERRON_DEPTHS),
            csv("perron_nodes.csv", PERRON_NODES),
        ],
        ExperimentKind::PerronSweep => vec![
            doc("perron.json", "per-depth envelopes, bracket, bound and solve count"),
            csv("perron_depths.csv", PERRON_DEPTHS),
            csv("perron_nodes.csv", PERRON_NODES),
        ],
        ExperimentKind::ModulusProbe => vec![
            csv(
                "samples.csv",
                &[
                    ("a", "first history (name) or starting point"),
                    ("b", "second history (name) or starting point"),
                    ("distance", "distance between the two inputs"),
                    ("gap", "observed difference of the probed quantity"),
                    ("fit", "fitted concave modulus evaluated at distance"),
                ],
            ),
            doc("fit.json", "vertices of the fitted modulus and the sample cloud"),
        ],
        ExperimentKind::ViscosityAudit => vec![
            doc("audit.json", "per-history reports, violation and member counts"),
            csv(
                "audit.csv",
                &[
                    ("history", "name of the audited history"),
                    ("alpha", "first-order coefficient of the test paraboloid"),
                    ("beta", "second-order coefficient of the test paraboloid"),
                    ("level", "control level of the membership test"),
                    ("sub_member", "candidate lies in the sub-jet"),
                    ("super_member", "candidate lies in the super-jet"),
                    ("sub_envelope", "envelope value of the sub-jet test"),
                    ("super_envelope", "envelope value of the super-jet test"),
                    ("minus_g", "-G evaluated at the candidate"),
                ],
            ),
        ],
        ExperimentKind::AssumptionsCheck => vec![
            doc("assumptions.json", "sampled assumption reports per generator"),
            csv(
                "violations.csv",
                &[
                    ("generator", "generator name from the config"),
                    ("check", "name of the failed check"),
                    ("sample", "index of the offending sample"),
                    ("detail", "sampled values"),
                ],
            ),
        ],
    };
    json!({"kind": kind, "artifacts": artifacts})
}
