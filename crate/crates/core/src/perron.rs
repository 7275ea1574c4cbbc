//! Recursive path-frozen construction over skeleton trees and the squeeze
//! `θ̲^m ≤ θ ≤ θ̄^m`.
//!
//! Every node solve lives on one global grid anchored at the history's final
//! value, so children and parents share nodes and time steps exactly.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::domains::{eps_localized, ConvexDomain};
use crate::error::{LabError, Result};
use crate::frozen_pde::{classify_boundary, frozen_model, solve_on_nodes, BoundaryKind};
use crate::generators::{ClosureMode, GeneratorSpec, HjbForm, Sense};
use crate::lattice::{
    anchored_grid, capacity, inf_expectation, local_window, sup_expectation, CapacityEvent, ControlBounds,
    LatticeField, LatticeModel, ReducedPayoff, StepReference,
};
use crate::paths::{de_distance, PiecewisePath};

/// A node of the skeleton tree. Positions are relative to the history's final value.
#[derive(Debug, Clone)]
pub struct SkeletonNode {
    pub skeleton: PiecewisePath,
    pub level: usize,
    pub domain: ConvexDomain,
    pub children: Vec<SkeletonNode>,
}

impl SkeletonNode {
    pub fn count(&self) -> usize {
        1 + self.children.iter().map(|c| c.count()).sum::<usize>()
    }

    pub fn depth(&self) -> usize {
        self.children.iter().map(|c| 1 + c.depth()).max().unwrap_or(0)
    }
}

/// Skeleton tree of depth at most `depth`: children sit at the outer-sphere
/// endpoints `±eps` of each localized domain.
pub fn build_tree(history: &PiecewisePath, eps: f64, q: &ConvexDomain, depth: usize) -> Result<SkeletonNode> {
    if q.dim() != 1 {
        return Err(LabError::Unsupported("skeleton trees are one-dimensional".into()));
    }
    grow(history, &PiecewisePath::zero(1), 0, eps, q, depth)
}

fn grow(
    history: &PiecewisePath,
    skeleton: &PiecewisePath,
    level: usize,
    eps: f64,
    q: &ConvexDomain,
    depth: usize,
) -> Result<SkeletonNode> {
    let full = history.concat(skeleton)?;
    let domain = eps_localized(eps, q, &full)?;
    let mut children = Vec::new();
    if level < depth {
        let (lo, hi) = domain.as_interval()?;
        for x in [lo, hi] {
            if classify_boundary(eps, q, &full, &[x])? == BoundaryKind::OuterSphere {
                let child = skeleton.extend(&[x])?;
                children.push(grow(history, &child, level + 1, eps, q, depth)?);
            }
        }
    }
    Ok(SkeletonNode {
        skeleton: skeleton.clone(),
        level,
        domain,
        children,
    })
}

/// Inputs of a sweep.
#[derive(Debug, Clone)]
pub struct PerronProblem {
    pub history: PiecewisePath,
    pub q: ConvexDomain,
    pub generator: GeneratorSpec,
    pub payoff: ReducedPayoff,
    pub eps: f64,
    pub h: f64,
    pub closure: ClosureMode,
    /// Repeat the deepest level at `2h` and widen the bracket by the change.
    pub richardson: bool,
}

impl PerronProblem {
    pub fn new(
        history: PiecewisePath,
        q: ConvexDomain,
        generator: GeneratorSpec,
        payoff: ReducedPayoff,
        eps: f64,
        h: f64,
    ) -> Self {
        Self {
            history,
            q,
            generator,
            payoff,
            eps,
            h,
            closure: ClosureMode::Canonical,
            richardson: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Upper,
    Lower,
}

/// Values of one node for one truncation depth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeRecord {
    /// Skeleton positions relative to the history's final value.
    pub skeleton: Vec<f64>,
    pub level: usize,
    pub upper: f64,
    pub lower: f64,
    /// Local grid (relative to the node's position) and the two fields on it.
    pub nodes: Vec<f64>,
    pub upper_field: Vec<f64>,
    pub lower_field: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DepthRecord {
    pub m: usize,
    pub upper: f64,
    pub lower: f64,
    /// `θ̄^m − θ̲^m` at the root point.
    pub gap: f64,
    /// Sup norm of `θ̄^m − θ̲^m` over the root's localized domain.
    pub root_field_gap: f64,
    /// `C^{L_0}[h_m < h_Q]` from the root.
    pub capacity: f64,
    /// Largest closure gap over the depth-`m` leaves.
    pub leaf_gap: f64,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerronResult {
    pub depths: Vec<DepthRecord>,
    /// Bracket at the deepest `m`, widened by the Richardson estimate when requested.
    pub bracket: (f64, f64),
    pub u_estimate: f64,
    pub discretization_error: Option<f64>,
    /// `λ^{-1}(C_0) + C_0 + sup|ξ|`.
    pub bound: f64,
    pub solves: usize,
}

impl PerronResult {
    pub fn gaps(&self) -> Vec<f64> {
        self.depths.iter().map(|d| d.gap).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "depths": self.depths.iter().map(|d| serde_json::json!({
                "m": d.m, "upper": d.upper, "lower": d.lower, "gap": d.gap,
                "root_field_gap": d.root_field_gap, "capacity": d.capacity,
                "leaf_gap": d.leaf_gap, "nodes": d.nodes.len(),
            })).collect::<Vec<_>>(),
            "bracket": [self.bracket.0, self.bracket.1],
            "u_estimate": self.u_estimate,
            "discretization_error": self.discretization_error,
            "bound": self.bound,
            "solves": self.solves,
        })
    }

    pub fn nodes_csv(&self) -> String {
        let mut out = String::from("m,level,skeleton,upper,lower\n");
        for d in &self.depths {
            for n in &d.nodes {
                let sk: Vec<String> = n.skeleton.iter().map(|v| format!("{v}")).collect();
                out.push_str(&format!("{},{},{},{},{}\n", d.m, n.level, sk.join(" "), n.upper, n.lower));
            }
        }
        out
    }
}

type MemoKey = (Side, Vec<u64>, usize);

struct Engine<'a> {
    p: &'a PerronProblem,
    x: Vec<f64>,
    step: StepReference,
    upper_closure: LatticeField,
    lower_closure: LatticeField,
    memo: HashMap<MemoKey, (f64, Vec<f64>)>,
    solves: usize,
}

fn key_of(full: &PiecewisePath) -> Vec<u64> {
    full.breakpoints().flat_map(|(_, v)| v.iter().map(|c| c.to_bits())).collect()
}

fn closure_model(form: &HjbForm, omega: &PiecewisePath, h: f64) -> Result<LatticeModel> {
    LatticeModel::from_hjb(form, omega, h)
}

impl<'a> Engine<'a> {
    fn new(p: &'a PerronProblem, h: f64) -> Result<Self> {
        if p.q.dim() != 1 || p.generator.dim != 1 {
            return Err(LabError::Unsupported("the sweep is one-dimensional".into()));
        }
        let ratio = p.eps / h;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(LabError::InvalidInput(format!(
                "eps = {} must be a positive multiple of h = {h}",
                p.eps
            )));
        }
        let (lo, hi) = p.q.as_interval()?;
        let start = p.history.final_value()[0];
        if !(lo < start && start < hi) {
            return Err(LabError::BoundaryReached);
        }
        let x = anchored_grid(lo, hi, start, h)?;
        let (up, low) = p.generator.closures(p.closure)?;
        let mu = closure_model(&up, &p.history, h)?;
        let ml = closure_model(&low, &p.history, h)?;
        let mut step = mu.step.max(ml.step).max(cap_model(p, h)?.step);
        if let Some(g) = frozen_model(&p.generator, &p.history, h, None)? {
            step = step.max(g.step);
        }
        let solve = |form: &HjbForm, m: LatticeModel| -> Result<LatticeField> {
            let m = m.aligned_with(step);
            match form.sense {
                Sense::Sup => sup_expectation(&m, &p.payoff, &p.q, 0.0, &p.history),
                Sense::Inf => inf_expectation(&m, &p.payoff, &p.q, 0.0, &p.history),
            }
        };
        let upper_closure = solve(&up, mu)?;
        let lower_closure = solve(&low, ml)?;
        Ok(Self {
            p,
            x,
            step,
            upper_closure,
            lower_closure,
            memo: HashMap::new(),
            solves: 0,
        })
    }

    fn index_of(&self, pos: f64) -> Result<usize> {
        let k = self.x.partition_point(|&s| s < pos - 1e-9);
        if k < self.x.len() && (self.x[k] - pos).abs() <= 1e-9 {
            Ok(k)
        } else {
            Err(LabError::InvalidInput(format!("skeleton point {pos} is off the grid")))
        }
    }

    /// `θ_n(π_n; ·)` on the node's localized grid for `remaining = m − n`.
    fn theta(&mut self, side: Side, full: &PiecewisePath, remaining: usize) -> Result<(f64, Vec<f64>)> {
        let key = (side, key_of(full), remaining);
        if let Some(v) = self.memo.get(&key) {
            return Ok(v.clone());
        }
        let pos = full.final_value()[0];
        let c = self.index_of(pos)?;
        let (a, b, ls, rs) = local_window(&self.x, c, self.p.eps);
        let out = if remaining == 0 {
            let field = match side {
                Side::Upper => &self.upper_closure,
                Side::Lower => &self.lower_closure,
            };
            let aux = self.p.payoff.state_init(full);
            let vals: Vec<f64> = self.x[a..=b].iter().map(|&xi| field.value_at(&[xi], aux)).collect();
            (vals[c - a], vals)
        } else {
            let mut bc = [0.0; 2];
            for (slot, (j, sphere)) in [(a, ls), (b, rs)].into_iter().enumerate() {
                let rel = self.x[j] - pos;
                bc[slot] = if sphere {
                    let child = full.extend(&[rel])?;
                    self.theta(side, &child, remaining - 1)?.0
                } else {
                    self.p.payoff.evaluate_path(&full.extend(&[rel])?)
                };
            }
            self.solves += 1;
            let f = solve_on_nodes(&self.p.generator, full, &self.x[a..=b], bc[0], bc[1], Some(self.step))
                .map_err(|e| e.at_node(format!("skeleton ending at {pos}, {remaining} levels left")))?;
            (f.values[c - a], f.values)
        };
        self.memo.insert(key, out.clone());
        Ok(out)
    }

    fn collect(
        &mut self,
        full: &PiecewisePath,
        skeleton: Vec<f64>,
        level: usize,
        m: usize,
        out: &mut Vec<NodeRecord>,
        leaf_gap: &mut f64,
    ) -> Result<()> {
        let (u, uf) = self.theta(Side::Upper, full, m - level)?;
        let (l, lf) = self.theta(Side::Lower, full, m - level)?;
        let pos = full.final_value()[0];
        let c = self.index_of(pos)?;
        let (a, b, ls, rs) = local_window(&self.x, c, self.p.eps);
        if level == m {
            *leaf_gap = leaf_gap.max(u - l);
        }
        let base = self.p.history.final_value()[0];
        out.push(NodeRecord {
            skeleton: skeleton.clone(),
            level,
            upper: u,
            lower: l,
            nodes: self.x[a..=b].iter().map(|v| v - pos).collect(),
            upper_field: uf,
            lower_field: lf,
        });
        if level < m {
            for (j, sphere) in [(a, ls), (b, rs)] {
                if sphere {
                    let child = full.extend(&[self.x[j] - pos])?;
                    let mut sk = skeleton.clone();
                    sk.push(self.x[j] - base);
                    self.collect(&child, sk, level + 1, m, out, leaf_gap)?;
                }
            }
        }
        Ok(())
    }
}

fn cap_model(p: &PerronProblem, h: f64) -> Result<LatticeModel> {
    LatticeModel::new(&ControlBounds::canonical(p.generator.lip)?.undiscounted(), h)
}

fn payoff_sup(p: &PerronProblem, x: &[f64]) -> f64 {
    let aux0 = p.payoff.state_init(&p.history);
    let mut levels = vec![aux0];
    levels.extend(x.iter().map(|&v| p.payoff.state_update(aux0, &[v])));
    let mut s = 0.0f64;
    for &xi in x {
        for &m in &levels {
            s = s.max(p.payoff.terminal(&[xi], p.payoff.state_update(m, &[xi])).abs());
        }
    }
    s
}

/// Leaf value `E̅[ξ]` (upper) or `E̲[ξ]` (lower) under the closing generator,
/// started at the end of `history ⊗ skeleton` with the payoff state of that path.
#[allow(clippy::too_many_arguments)]
pub fn terminal_closure(
    history: &PiecewisePath,
    skeleton: &PiecewisePath,
    side: Side,
    q: &ConvexDomain,
    g: &GeneratorSpec,
    payoff: &ReducedPayoff,
    h: f64,
    mode: ClosureMode,
) -> Result<f64> {
    let full = history.concat(skeleton)?;
    let (up, low) = g.closures(mode)?;
    let form = match side {
        Side::Upper => up,
        Side::Lower => low,
    };
    let model = closure_model(&form, &full, h)?;
    let field = match form.sense {
        Sense::Sup => sup_expectation(&model, payoff, q, 0.0, &full)?,
        Sense::Inf => inf_expectation(&model, payoff, q, 0.0, &full)?,
    };
    Ok(field.start_value)
}

/// Runs the squeeze for every depth in `m_list`.
pub fn sweep(p: &PerronProblem, m_list: &[usize]) -> Result<PerronResult> {
    if m_list.is_empty() {
        return Err(LabError::InvalidInput("empty depth list".into()));
    }
    let mut eng = Engine::new(p, p.h)?;
    let start = p.history.final_value()[0];
    let (lo, hi) = p.q.as_interval()?;
    let cap = cap_model(p, p.h)?.aligned_with(eng.step);
    let mut depths = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let mut nodes = Vec::new();
        let mut leaf_gap = f64::NEG_INFINITY;
        eng.collect(&p.history, vec![0.0], 0, m, &mut nodes, &mut leaf_gap)?;
        let root = &nodes[0];
        let root_field_gap = root
            .upper_field
            .iter()
            .zip(&root.lower_field)
            .fold(0.0f64, |s, (u, l)| s.max((u - l).abs()));
        let capacity = capacity(
            &cap,
            &ConvexDomain::interval(lo, hi)?,
            start,
            &CapacityEvent::CascadeBeforeExit { eps: p.eps, steps: m },
        )?;
        depths.push(DepthRecord {
            m,
            upper: root.upper,
            lower: root.lower,
            gap: root.upper - root.lower,
            root_field_gap,
            capacity,
            leaf_gap: leaf_gap.max(0.0),
            nodes,
        });
    }
    let last = depths.last().unwrap();
    let (mut lo_b, mut hi_b) = (last.lower, last.upper);
    let mut disc = None;
    if p.richardson {
        let m = *m_list.last().unwrap();
        let mut coarse = Engine::new(p, 2.0 * p.h)?;
        let u2 = coarse.theta(Side::Upper, &p.history, m)?.0;
        let l2 = coarse.theta(Side::Lower, &p.history, m)?.0;
        let err = (0.5 * (u2 + l2) - 0.5 * (last.upper + last.lower)).abs();
        lo_b -= err;
        hi_b += err;
        disc = Some(err);
    }
    let c0 = p.generator.bound;
    let bound = p.generator.lambda_inverse(c0) + c0 + payoff_sup(p, &eng.x);
    Ok(PerronResult {
        bracket: (lo_b, hi_b),
        u_estimate: 0.5 * (last.upper + last.lower),
        discretization_error: disc,
        bound,
        solves: eng.solves,
        depths,
    })
}

/// `(|u(ω¹) − u(ω²)|, d^e(ω¹, ω²))` from two sweeps at depth `m`.
pub fn modulus_probe(
    p: &PerronProblem,
    history1: &PiecewisePath,
    history2: &PiecewisePath,
    m: usize,
    mesh: f64,
) -> Result<(f64, f64)> {
    let mut p1 = p.clone();
    p1.history = history1.clone();
    p1.richardson = false;
    let mut p2 = p1.clone();
    p2.history = history2.clone();
    let r1 = sweep(&p1, &[m])?;
    let r2 = sweep(&p2, &[m])?;
    Ok(((r1.u_estimate - r2.u_estimate).abs(), de_distance(history1, history2, mesh)?))
}
