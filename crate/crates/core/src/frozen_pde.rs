//! Monotone solver for the one-dimensional Dirichlet problem
//! `−G(ω, v, v′, v″) = 0` with the path argument held fixed.

use serde::{Deserialize, Serialize};

use crate::domains::{eps_localized, ConvexDomain};
use crate::error::{LabError, Result};
use crate::generators::{GeneratorKind, GeneratorSpec, Sense};
use crate::lattice::{anchored_grid, solve_line, Action, ControlBounds, ControlPoint, LatticeModel, StepReference, Table};
use crate::paths::PiecewisePath;

const NEWTON_TOL: f64 = 1e-9;
const NEWTON_MAX_ITER: usize = 200;

/// A path-frozen Dirichlet problem on an interval.
#[derive(Debug, Clone)]
pub struct FrozenProblem {
    pub frozen_path: PiecewisePath,
    pub domain: ConvexDomain,
    pub generator: GeneratorSpec,
    pub boundary_lo: f64,
    pub boundary_hi: f64,
    pub h: f64,
    /// Grid nodes sit at `anchor + k h`; defaults to 0 when inside, else the midpoint.
    pub anchor: Option<f64>,
    /// Time-step reference shared with other solves (HJB forms only).
    pub step: Option<StepReference>,
}

impl FrozenProblem {
    pub fn new(
        frozen_path: PiecewisePath,
        domain: ConvexDomain,
        generator: GeneratorSpec,
        boundary_lo: f64,
        boundary_hi: f64,
        h: f64,
    ) -> Self {
        Self {
            frozen_path,
            domain,
            generator,
            boundary_lo,
            boundary_hi,
            h,
            anchor: None,
            step: None,
        }
    }
}

/// Nodal solution with solver diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueField {
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    /// Optimal control per node for HJB-form generators (`None` on the boundary).
    pub controls: Option<Vec<Option<ControlPoint>>>,
}

impl ValueField {
    pub fn value_at(&self, x: f64) -> f64 {
        crate::lattice::interp(&self.nodes, &self.values, x)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,value,drift,vol_sq,discount\n");
        for (i, (x, v)) in self.nodes.iter().zip(&self.values).enumerate() {
            let c = self.controls.as_ref().and_then(|c| c[i]);
            match c {
                Some(c) => out.push_str(&format!("{x},{v},{},{},{}\n", c.drift, c.vol_sq, c.discount)),
                None => out.push_str(&format!("{x},{v},,,\n")),
            }
        }
        out
    }

    pub fn diagnostics_json(&self) -> serde_json::Value {
        serde_json::json!({
            "nodes": self.nodes.len(),
            "iterations": self.iterations,
            "residual": self.residual,
            "residual_history": self.residual_history,
        })
    }
}

/// Solves the problem on the anchored grid of its interval.
pub fn solve_dirichlet(p: &FrozenProblem) -> Result<ValueField> {
    if p.generator.dim != 1 || p.domain.dim() != 1 {
        return Err(LabError::Unsupported("path-frozen solves are one-dimensional".into()));
    }
    let (lo, hi) = p.domain.as_interval()?;
    let anchor = p
        .anchor
        .unwrap_or(if lo < 0.0 && 0.0 < hi { 0.0 } else { 0.5 * (lo + hi) });
    let nodes = anchored_grid(lo, hi, anchor, p.h)?;
    solve_on_nodes(&p.generator, &p.frozen_path, &nodes, p.boundary_lo, p.boundary_hi, p.step)
}

/// The lattice model of an HJB-form generator frozen at `omega`.
pub fn frozen_model(
    g: &GeneratorSpec,
    omega: &PiecewisePath,
    h: f64,
    step: Option<StepReference>,
) -> Result<Option<LatticeModel>> {
    match &g.kind {
        GeneratorKind::Hjb(form) => {
            let m = LatticeModel::from_hjb(form, omega, h)?;
            Ok(Some(match step {
                Some(s) => m.aligned_with(s),
                None => m,
            }))
        }
        GeneratorKind::General(_) => Ok(None),
    }
}

/// Solves on explicit nodes; the first and last node carry the boundary data.
pub fn solve_on_nodes(
    g: &GeneratorSpec,
    omega: &PiecewisePath,
    nodes: &[f64],
    left: f64,
    right: f64,
    step: Option<StepReference>,
) -> Result<ValueField> {
    if nodes.len() < 2 {
        return Err(LabError::InvalidInput("need at least two nodes".into()));
    }
    let h = min_spacing(nodes);
    match frozen_model(g, omega, h, step)? {
        Some(model) => {
            let sense = g.hjb().map(|f| f.sense).unwrap_or(Sense::Sup);
            let table = Table::build(nodes, &model)?;
            let sol = solve_line(&table, 0, nodes.len(), sense, left, right, None, None)?;
            let controls = sol
                .action
                .iter()
                .map(|a| match a {
                    Action::Control(c) => Some(model.controls[*c]),
                    _ => None,
                })
                .collect();
            Ok(ValueField {
                nodes: nodes.to_vec(),
                values: sol.v,
                residual: sol.residual,
                iterations: sol.iterations,
                residual_history: vec![sol.residual],
                controls: Some(controls),
            })
        }
        None => newton(g, omega, nodes, left, right),
    }
}

fn min_spacing(nodes: &[f64]) -> f64 {
    nodes.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
}

struct Stencil {
    f: f64,
    lower: f64,
    diag: f64,
    upper: f64,
}

fn stencil(g: &GeneratorSpec, omega: &PiecewisePath, x: &[f64], v: &[f64], i: usize) -> Result<Stencil> {
    let (hm, hp) = (x[i] - x[i - 1], x[i + 1] - x[i]);
    let y = v[i];
    let dp = (v[i + 1] - v[i]) / hp;
    let dm = (v[i] - v[i - 1]) / hm;
    let gam = 2.0 * (dp - dm) / (hm + hp);
    let eval = |y: f64, z: f64, c: f64| g.evaluate_1d(omega, y, z, c);
    let zc = (v[i + 1] - v[i - 1]) / (hm + hp);
    let ez = 1e-6 * (1.0 + zc.abs());
    let upwind_up = eval(y, zc + ez, gam) >= eval(y, zc - ez, gam);
    let z = if upwind_up { dp } else { dm };
    let g0 = eval(y, z, gam);
    let ey = 1e-6 * (1.0 + y.abs());
    let eg = 1e-6 * (1.0 + gam.abs());
    let ez = 1e-6 * (1.0 + z.abs());
    let gy = (eval(y + ey, z, gam) - eval(y - ey, z, gam)) / (2.0 * ey);
    let gz = (eval(y, z + ez, gam) - eval(y, z - ez, gam)) / (2.0 * ez);
    let gg = (eval(y, z, gam + eg) - eval(y, z, gam - eg)) / (2.0 * eg);
    if gg < (1.0 - 1e-6) / g.lip {
        return Err(LabError::EllipticityViolation {
            node: i,
            detail: format!("dG/dgamma = {gg:.3e} below 1/L_0 = {:.3e}", 1.0 / g.lip),
        });
    }
    if gy > 1e-9 {
        return Err(LabError::EllipticityViolation {
            node: i,
            detail: format!("G increasing in y (dG/dy = {gy:.3e})"),
        });
    }
    let s = hm + hp;
    let (mut lower, mut diag, mut upper) = (
        -gg * 2.0 / (hm * s),
        -gy + gg * 2.0 / (hm * hp),
        -gg * 2.0 / (hp * s),
    );
    if upwind_up {
        diag += gz / hp;
        upper -= gz / hp;
    } else {
        diag -= gz / hm;
        lower += gz / hm;
    }
    Ok(Stencil {
        f: -g0,
        lower,
        diag,
        upper,
    })
}

fn residuals(g: &GeneratorSpec, omega: &PiecewisePath, x: &[f64], v: &[f64]) -> Result<Vec<Stencil>> {
    (1..x.len() - 1)
        .map(|i| stencil(g, omega, x, v, i).map_err(|e| e.at_node(format!("x = {}", x[i]))))
        .collect()
}

fn sup_norm(s: &[Stencil]) -> f64 {
    s.iter().fold(0.0, |m, r| m.max(r.f.abs()))
}

/// Damped Newton iteration on the upwind scheme of a general generator.
fn newton(g: &GeneratorSpec, omega: &PiecewisePath, x: &[f64], left: f64, right: f64) -> Result<ValueField> {
    let n = x.len();
    let (lo, hi) = (x[0], x[n - 1]);
    let mut v: Vec<f64> = x
        .iter()
        .map(|&xi| left + (right - left) * (xi - lo) / (hi - lo))
        .collect();
    let mut history = Vec::new();
    if n == 2 {
        return Ok(ValueField {
            nodes: x.to_vec(),
            values: v,
            residual: 0.0,
            iterations: 0,
            residual_history: history,
            controls: None,
        });
    }
    let mut st = residuals(g, omega, x, &v)?;
    let mut res = sup_norm(&st);
    history.push(res);
    let m = n - 2;
    for it in 1..=NEWTON_MAX_ITER {
        if res <= NEWTON_TOL {
            return Ok(ValueField {
                nodes: x.to_vec(),
                values: v,
                residual: res,
                iterations: it - 1,
                residual_history: history,
                controls: None,
            });
        }
        let a: Vec<f64> = st.iter().map(|s| s.lower).collect();
        let b: Vec<f64> = st.iter().map(|s| s.diag).collect();
        let c: Vec<f64> = st.iter().map(|s| s.upper).collect();
        let mut d: Vec<f64> = st.iter().map(|s| -s.f).collect();
        let mut a = a;
        let mut c = c;
        a[0] = 0.0;
        c[m - 1] = 0.0;
        crate::lattice::thomas(&a, &b, &c, &mut d);
        let mut step = 1.0;
        loop {
            let mut trial = v.clone();
            for j in 0..m {
                trial[j + 1] += step * d[j];
            }
            let st_t = residuals(g, omega, x, &trial)?;
            let r_t = sup_norm(&st_t);
            if r_t < (1.0 - 1e-4 * step) * res || step < 1.0 / 1024.0 {
                v = trial;
                st = st_t;
                res = r_t;
                break;
            }
            step *= 0.5;
        }
        history.push(res);
    }
    if res <= NEWTON_TOL {
        return Ok(ValueField {
            nodes: x.to_vec(),
            values: v,
            residual: res,
            iterations: NEWTON_MAX_ITER,
            residual_history: history,
            controls: None,
        });
    }
    Err(LabError::NonConvergence {
        iterations: NEWTON_MAX_ITER,
        residual: res,
    })
}

/// The discrete generator `G_h(v)` at interior nodes: `(T v − v)/dt` for
/// HJB forms, the upwind difference scheme otherwise. A solution gives 0;
/// `G_h ≥ 0` marks a subsolution and `G_h ≤ 0` a supersolution.
pub fn discrete_generator(
    field: &ValueField,
    g: &GeneratorSpec,
    omega: &PiecewisePath,
    step: Option<StepReference>,
) -> Result<Vec<f64>> {
    let x = &field.nodes;
    let v = &field.values;
    let n = x.len();
    if n < 3 {
        return Ok(vec![]);
    }
    match frozen_model(g, omega, min_spacing(x), step)? {
        Some(model) => {
            let sense = g.hjb().map(|f| f.sense).unwrap_or(Sense::Sup);
            let mut out = Vec::with_capacity(n - 2);
            for i in 1..n - 1 {
                let (hm, hp) = (x[i] - x[i - 1], x[i + 1] - x[i]);
                let mut best = match sense {
                    Sense::Sup => f64::NEG_INFINITY,
                    Sense::Inf => f64::INFINITY,
                };
                for c in &model.controls {
                    let (pm, p0, pp, dt) = model.transition(hm, hp, c)?;
                    let tv = c.cost * dt + (-c.discount * dt).exp() * (pm * v[i - 1] + p0 * v[i] + pp * v[i + 1]);
                    let r = (tv - v[i]) / dt;
                    best = match sense {
                        Sense::Sup => best.max(r),
                        Sense::Inf => best.min(r),
                    };
                }
                out.push(best);
            }
            Ok(out)
        }
        None => Ok(residuals(g, omega, x, v)?.iter().map(|s| -s.f).collect()),
    }
}

/// Nodewise check of `(v¹ − v²)(x) ≤ E̅[(boundary gap)⁺ + ∫ distance dt]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub nodes: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub max_violation: f64,
}

/// Compares two solutions on the same grid against the lattice bound of
/// their positive boundary gap. `generator_distance` is the sup-norm
/// distance between the two frozen generators (0 when they coincide).
pub fn comparison_gap(
    v1: &ValueField,
    v2: &ValueField,
    bounds: &ControlBounds,
    generator_distance: f64,
    step: Option<StepReference>,
) -> Result<ComparisonReport> {
    if v1.nodes.len() != v2.nodes.len()
        || v1.nodes.iter().zip(&v2.nodes).any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(LabError::GridMismatch);
    }
    let x = &v1.nodes;
    let n = x.len();
    let lhs: Vec<f64> = v1.values.iter().zip(&v2.values).map(|(a, b)| a - b).collect();
    let left = lhs[0].max(0.0);
    let right = lhs[n - 1].max(0.0);
    let mut model = LatticeModel::new(&bounds.undiscounted(), min_spacing(x))?.with_running_cost(generator_distance);
    if let Some(s) = step {
        model = model.aligned_with(s);
    }
    let table = Table::build(x, &model)?;
    let sol = solve_line(&table, 0, n, Sense::Sup, left, right, None, None)?;
    let max_violation = lhs
        .iter()
        .zip(&sol.v)
        .fold(0.0f64, |m, (l, r)| m.max(l - r));
    Ok(ComparisonReport {
        nodes: x.clone(),
        lhs,
        rhs: sol.v,
        max_violation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    OuterSphere,
    DomainBoundary,
}

/// Classifies a boundary point `x` (relative to the history's final value)
/// of the localized domain. Points on both the sphere and `∂Q` count as
/// domain boundary.
pub fn classify_boundary(eps: f64, q: &ConvexDomain, history: &PiecewisePath, x: &[f64]) -> Result<BoundaryKind> {
    let tol = 1e-9 * (1.0 + eps);
    eps_localized(eps, q, history)?;
    let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let abs: Vec<f64> = history.final_value().iter().zip(x).map(|(a, b)| a + b).collect();
    let on_q = on_boundary_of(q, &abs, tol);
    let on_sphere = (r - eps).abs() <= tol;
    let inside = r <= eps + tol && (q.contains(&abs) || on_q);
    if !inside || !(on_q || on_sphere) {
        return Err(LabError::InvalidInput(format!(
            "{x:?} is not on the boundary of the localized domain"
        )));
    }
    Ok(if on_q {
        BoundaryKind::DomainBoundary
    } else {
        BoundaryKind::OuterSphere
    })
}

fn on_boundary_of(q: &ConvexDomain, p: &[f64], tol: f64) -> bool {
    if let Ok((lo, hi)) = q.as_interval() {
        return (p[0] - lo).abs() <= tol || (p[0] - hi).abs() <= tol;
    }
    if !q.contains(p) {
        return true;
    }
    // Inside: on the boundary if some coordinate nudge leaves the domain.
    (0..p.len()).any(|k| {
        [-tol, tol].iter().any(|s| {
            let mut t = p.to_vec();
            t[k] += s;
            !q.contains(&t)
        })
    })
}
