//! Viscosity checks of computed fields through paraboloid semijets: a jet
//! `(α, β)` belongs to `J̲` (resp. `J̄`) when `Q^{α,β} − u` is minimal (resp.
//! maximal) at the current point in the sense of the inf (resp. sup) Snell
//! envelope over the `ε`-exit.

use serde::{Deserialize, Serialize};

use crate::domains::{eps_localized, ConvexDomain};
use crate::error::{LabError, Result};
use crate::frozen_pde::{discrete_generator, ValueField};
use crate::generators::{vol_band, GeneratorSpec};
use crate::lattice::{anchored_grid, interp, snell_inf, snell_sup, ControlBounds, LatticeModel, ReducedPayoff, StepReference};
use crate::paths::PiecewisePath;

/// Paraboloid `α x + ½ β x²` tested at level `L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JetCandidate {
    pub alpha: f64,
    pub beta: f64,
    pub level: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JetSide {
    /// `J̲`: the paraboloid touches from above (subsolution test).
    Sub,
    /// `J̄`: the paraboloid touches from below (supersolution test).
    Super,
}

/// Localization and discretization of the membership test.
#[derive(Debug, Clone)]
pub struct AuditSetup {
    pub q: ConvexDomain,
    pub eps: f64,
    pub h: f64,
    /// Envelope values within `tol` of 0 count as membership.
    pub membership_tol: f64,
    /// Allowed sign error of `−G(ω, u, α, β)`.
    pub generator_tol: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Membership {
    pub member: bool,
    /// Snell envelope of the obstacle at the root.
    pub envelope: f64,
}

pub type PathFunctional<'a> = dyn Fn(&PiecewisePath) -> Result<f64> + Sync + 'a;

/// `U(x) = u(ω ⊗ Lin{(1, x)}) − u(ω)` on the grid of the localized domain.
fn increments(u: &PathFunctional, history: &PiecewisePath, setup: &AuditSetup) -> Result<(Vec<f64>, Vec<f64>)> {
    if history.dim() != 1 {
        return Err(LabError::Unsupported("jet audits are one-dimensional".into()));
    }
    let (lo, hi) = eps_localized(setup.eps, &setup.q, history)?.as_interval()?;
    let nodes = anchored_grid(lo, hi, 0.0, setup.h)?;
    let u0 = u(history)?;
    let vals = nodes
        .iter()
        .map(|&x| u(&history.extend(&[x])?).map(|v| v - u0))
        .collect::<Result<Vec<f64>>>()?;
    Ok((nodes, vals))
}

fn membership_on(nodes: &[f64], incr: &[f64], cand: &JetCandidate, side: JetSide, setup: &AuditSetup) -> Result<Membership> {
    if !(cand.level > 0.0) || !cand.alpha.is_finite() || !cand.beta.is_finite() {
        return Err(LabError::InvalidInput(format!("bad candidate {cand:?}")));
    }
    let obstacle: Vec<f64> = nodes
        .iter()
        .zip(incr)
        .map(|(&x, &du)| cand.alpha * x + 0.5 * cand.beta * x * x - du)
        .collect();
    let (xs, os) = (nodes.to_vec(), obstacle);
    let payoff = ReducedPayoff::markovian("paraboloid_gap", move |x| interp(&xs, &os, x[0]));
    let l = cand.level;
    let (vlo, vhi) = vol_band(l);
    let model = LatticeModel::new(&ControlBounds::new(l, vlo, vhi, 0.0, 0.0)?, setup.h)?;
    let dom = ConvexDomain::interval(nodes[0], nodes[nodes.len() - 1])?;
    let origin = PiecewisePath::zero(1);
    let res = match side {
        JetSide::Sub => snell_inf(&model, &payoff, &dom, &origin)?,
        JetSide::Super => snell_sup(&model, &payoff, &dom, &origin)?,
    };
    let y = res.field.start_value;
    let member = match side {
        JetSide::Sub => y >= -setup.membership_tol,
        JetSide::Super => y <= setup.membership_tol,
    };
    Ok(Membership { member, envelope: y })
}

/// Whether `cand` lies in the requested semijet of `u` at `history`.
pub fn jet_membership(
    u: &PathFunctional,
    history: &PiecewisePath,
    cand: &JetCandidate,
    side: JetSide,
    setup: &AuditSetup,
) -> Result<Membership> {
    let (nodes, incr) = increments(u, history, setup)?;
    membership_on(&nodes, &incr, cand, side, setup)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditEntry {
    pub candidate: JetCandidate,
    pub sub_member: bool,
    pub super_member: bool,
    pub sub_envelope: f64,
    pub super_envelope: f64,
    /// `−G(ω, u(ω), α, β)`.
    pub minus_g: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditViolation {
    pub candidate: JetCandidate,
    pub side: JetSide,
    /// Amount by which `−G` has the wrong sign.
    pub margin: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AuditReport {
    pub u_value: f64,
    pub entries: Vec<AuditEntry>,
    pub violations: Vec<AuditViolation>,
}

/// Tests every candidate for membership in both semijets and flags members
/// with the wrong sign of `−G`.
pub fn audit_point(
    u: &PathFunctional,
    history: &PiecewisePath,
    g: &GeneratorSpec,
    setup: &AuditSetup,
    candidates: &[JetCandidate],
) -> Result<AuditReport> {
    if candidates.is_empty() {
        return Ok(AuditReport::default());
    }
    let (nodes, incr) = increments(u, history, setup)?;
    let u0 = u(history)?;
    let mut report = AuditReport {
        u_value: u0,
        ..Default::default()
    };
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| a.alpha.total_cmp(&b.alpha).then(a.beta.total_cmp(&b.beta)));
    for cand in sorted {
        let sub = membership_on(&nodes, &incr, &cand, JetSide::Sub, setup)?;
        let sup = membership_on(&nodes, &incr, &cand, JetSide::Super, setup)?;
        let minus_g = -g.evaluate_1d(history, u0, cand.alpha, cand.beta);
        if sub.member && minus_g > setup.generator_tol {
            report.violations.push(AuditViolation {
                candidate: cand,
                side: JetSide::Sub,
                margin: minus_g,
            });
        }
        if sup.member && minus_g < -setup.generator_tol {
            report.violations.push(AuditViolation {
                candidate: cand,
                side: JetSide::Super,
                margin: -minus_g,
            });
        }
        report.entries.push(AuditEntry {
            candidate: cand,
            sub_member: sub.member,
            super_member: sup.member,
            sub_envelope: sub.envelope,
            super_envelope: sup.envelope,
            minus_g,
        });
    }
    Ok(report)
}

/// `n × n` candidates over `[α₀ − dα, α₀ + dα] × [β₀ − dβ, β₀ + dβ]`.
pub fn candidate_grid(center: (f64, f64), half_width: (f64, f64), n: usize, level: f64) -> Vec<JetCandidate> {
    let axis = |c: f64, w: f64| -> Vec<f64> {
        if n == 1 {
            vec![c]
        } else {
            (0..n).map(|k| c - w + 2.0 * w * k as f64 / (n - 1) as f64).collect()
        }
    };
    let mut out = Vec::with_capacity(n * n);
    for &alpha in &axis(center.0, half_width.0) {
        for &beta in &axis(center.1, half_width.1) {
            out.push(JetCandidate { alpha, beta, level });
        }
    }
    out
}

/// Central-difference estimates `(u′, u″)` at the history along straight extensions.
pub fn difference_jet(u: &PathFunctional, history: &PiecewisePath, h: f64) -> Result<(f64, f64)> {
    let u0 = u(history)?;
    let up = u(&history.extend(&[h])?)?;
    let dn = u(&history.extend(&[-h])?)?;
    Ok(((up - dn) / (2.0 * h), (up - 2.0 * u0 + dn) / (h * h)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderingReport {
    /// `max (u¹ − u²)` over all nodes.
    pub max_excess: f64,
    pub holds: bool,
}

/// Checks `u¹ ≤ u²` for a discrete subsolution `u¹` and supersolution `u²`
/// of the generator frozen at `omega`.
pub fn ordering_check(
    u1: &ValueField,
    u2: &ValueField,
    g: &GeneratorSpec,
    omega: &PiecewisePath,
    step: Option<StepReference>,
    tol: f64,
) -> Result<OrderingReport> {
    if u1.nodes.len() != u2.nodes.len() || u1.nodes.iter().zip(&u2.nodes).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(LabError::GridMismatch);
    }
    let n = u1.nodes.len();
    for k in [0, n - 1] {
        if u1.values[k] > u2.values[k] + tol {
            return Err(LabError::Precondition(format!("boundary order fails at node {k}")));
        }
    }
    if let Some(r) = discrete_generator(u1, g, omega, step)?.iter().position(|&r| r < -tol) {
        return Err(LabError::Precondition(format!("first field is not a subsolution at node {}", r + 1)));
    }
    if let Some(r) = discrete_generator(u2, g, omega, step)?.iter().position(|&r| r > tol) {
        return Err(LabError::Precondition(format!("second field is not a supersolution at node {}", r + 1)));
    }
    let max_excess = u1
        .values
        .iter()
        .zip(&u2.values)
        .fold(f64::NEG_INFINITY, |m, (a, b)| m.max(a - b));
    Ok(OrderingReport {
        max_excess,
        holds: max_excess <= tol,
    })
}
