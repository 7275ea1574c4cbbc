//! Controlled Markov chains on a spatial grid: nonlinear expectations,
//! Snell envelopes, capacities and Monte Carlo lower bounds.
//!
//! The one-step scheme is the upwind trinomial
//! `p± = β² dt / (h± (h₊ + h₋)) + α^± dt / h±`, `p₀ = 1 − p₊ − p₋`,
//! with the node's time step chosen so that all weights stay nonnegative for
//! the reference extremes. Discounting enters as `e^{−b dt}`, running cost as
//! `cost · dt`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domains::ConvexDomain;
use crate::error::{LabError, Result};
use crate::generators::{HjbForm, Sense, Source};
use crate::paths::PiecewisePath;

const PI_MAX_ITER: usize = 500;
const VI_TOL: f64 = 1e-9;
const VI_MAX_ITER: usize = 1_000_000;

/// Bands of the admissible controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub drift_bound: f64,
    pub vol_sq_lo: f64,
    pub vol_sq_hi: f64,
    pub discount_lo: f64,
    pub discount_hi: f64,
}

impl ControlBounds {
    pub fn new(
        drift_bound: f64,
        vol_sq_lo: f64,
        vol_sq_hi: f64,
        discount_lo: f64,
        discount_hi: f64,
    ) -> Result<Self> {
        let all = [drift_bound, vol_sq_lo, vol_sq_hi, discount_lo, discount_hi];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0)
            || vol_sq_lo > vol_sq_hi
            || discount_lo > discount_hi
        {
            return Err(LabError::InvalidInput(format!(
                "bad control bounds {all:?} (need finite, nonnegative, lo <= hi)"
            )));
        }
        Ok(Self {
            drift_bound,
            vol_sq_lo,
            vol_sq_hi,
            discount_lo,
            discount_hi,
        })
    }

    /// `|α| ≤ L`, `β² ∈ [2/L, 2L]`, `b ∈ [0, L]`.
    pub fn canonical(lip: f64) -> Result<Self> {
        let (lo, hi) = crate::generators::vol_band(lip);
        Self::new(lip, lo, hi, 0.0, lip)
    }

    /// Same drift and volatility bands, without discounting.
    pub fn undiscounted(&self) -> Self {
        Self {
            discount_lo: 0.0,
            discount_hi: 0.0,
            ..*self
        }
    }

    pub fn contains(&self, c: &ControlPoint) -> bool {
        let tol = 1e-12;
        c.drift.abs() <= self.drift_bound * (1.0 + tol) + tol
            && c.vol_sq >= self.vol_sq_lo * (1.0 - tol) - tol
            && c.vol_sq <= self.vol_sq_hi * (1.0 + tol) + tol
            && c.discount >= self.discount_lo * (1.0 - tol) - tol
            && c.discount <= self.discount_hi * (1.0 + tol) + tol
    }

    /// Extreme points of the bands (drift includes 0, where `|z|` terms can
    /// be optimized by no drift at all).
    pub fn vertices(&self, cost: f64) -> Vec<ControlPoint> {
        let drifts: Vec<f64> = if self.drift_bound > 0.0 {
            vec![0.0, -self.drift_bound, self.drift_bound]
        } else {
            vec![0.0]
        };
        let vols = endpoints(self.vol_sq_hi, self.vol_sq_lo);
        let discs = endpoints(self.discount_lo, self.discount_hi);
        let mut out = Vec::new();
        for &vol_sq in &vols {
            for &drift in &drifts {
                for &discount in &discs {
                    out.push(ControlPoint {
                        drift,
                        vol_sq,
                        discount,
                        cost,
                    });
                }
            }
        }
        out
    }
}

fn endpoints(a: f64, b: f64) -> Vec<f64> {
    if a == b {
        vec![a]
    } else {
        vec![a, b]
    }
}

/// One admissible control value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub drift: f64,
    pub vol_sq: f64,
    pub discount: f64,
    pub cost: f64,
}

/// Extremes used to pick the per-node time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReference {
    pub vol_sq_hi: f64,
    pub drift_hi: f64,
}

impl StepReference {
    pub fn of(controls: &[ControlPoint]) -> Self {
        Self {
            vol_sq_hi: controls.iter().map(|c| c.vol_sq).fold(0.0, f64::max),
            drift_hi: controls.iter().map(|c| c.drift.abs()).fold(0.0, f64::max),
        }
    }

    pub fn max(self, other: Self) -> Self {
        Self {
            vol_sq_hi: self.vol_sq_hi.max(other.vol_sq_hi),
            drift_hi: self.drift_hi.max(other.drift_hi),
        }
    }

    /// Largest step keeping all weights nonnegative at a node with spacings `h₋`, `h₊`.
    pub fn dt(&self, hm: f64, hp: f64) -> f64 {
        hm * hp / (self.vol_sq_hi + self.drift_hi * hm.max(hp))
    }
}

/// A controlled chain: grid step, control lattice and time-step reference.
#[derive(Debug, Clone)]
pub struct LatticeModel {
    pub h: f64,
    pub controls: Vec<ControlPoint>,
    pub step: StepReference,
}

impl LatticeModel {
    /// Control lattice at the band vertices, zero running cost.
    pub fn new(bounds: &ControlBounds, h: f64) -> Result<Self> {
        Self::from_controls(bounds.vertices(0.0), h)
    }

    pub fn from_controls(controls: Vec<ControlPoint>, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(LabError::InvalidInput("grid step must be positive".into()));
        }
        if controls.is_empty() {
            return Err(LabError::InvalidInput("empty control lattice".into()));
        }
        for c in &controls {
            if !(c.vol_sq > 0.0) {
                return Err(LabError::Cfl(
                    "dynamic programming needs strictly positive volatility".into(),
                ));
            }
            if c.discount < 0.0 || !c.cost.is_finite() || !c.drift.is_finite() {
                return Err(LabError::InvalidInput(format!("bad control {c:?}")));
            }
        }
        let step = StepReference::of(&controls);
        Ok(Self { h, controls, step })
    }

    /// The control box of an HJB generator with the source frozen at `omega`.
    pub fn from_hjb(form: &HjbForm, omega: &PiecewisePath, h: f64) -> Result<Self> {
        let cost = form.source.value(omega);
        let mut drifts = form.drift.endpoints();
        if form.drift.contains(0.0) && !drifts.contains(&0.0) {
            drifts.insert(0, 0.0);
        }
        let mut controls = Vec::new();
        for &vol_sq in form.vol_sq.endpoints().iter().rev() {
            for &drift in &drifts {
                for &discount in &form.discount.endpoints() {
                    controls.push(ControlPoint {
                        drift,
                        vol_sq,
                        discount,
                        cost,
                    });
                }
            }
        }
        Self::from_controls(controls, h)
    }

    /// Uses at least the extremes of `other` for the time step, so that two
    /// models share one discrete operator family.
    pub fn aligned_with(mut self, other: StepReference) -> Self {
        self.step = self.step.max(other);
        self
    }

    pub fn with_running_cost(&self, extra: f64) -> Self {
        let mut m = self.clone();
        for c in &mut m.controls {
            c.cost += extra;
        }
        m
    }

    /// Transition weights `(p₋, p₀, p₊)` and the time step at a node with
    /// spacings `h₋`, `h₊`.
    pub fn transition(&self, hm: f64, hp: f64, c: &ControlPoint) -> Result<(f64, f64, f64, f64)> {
        let dt = self.step.dt(hm, hp);
        let w = transition_weights(hm, hp, dt, c);
        if w.1 < -1e-12 {
            return Err(LabError::Cfl(format!(
                "negative weight {} for control {c:?}",
                w.1
            )));
        }
        Ok((w.0, w.1.max(0.0), w.2, dt))
    }
}

fn transition_weights(hm: f64, hp: f64, dt: f64, c: &ControlPoint) -> (f64, f64, f64) {
    let pp = c.vol_sq * dt / (hp * (hp + hm)) + c.drift.max(0.0) * dt / hp;
    let pm = c.vol_sq * dt / (hm * (hp + hm)) + (-c.drift).max(0.0) * dt / hm;
    (pm, 1.0 - pp - pm, pp)
}

// ---------------------------------------------------------------------------
// Payoffs.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxKind {
    /// Markovian: depends on the final value only.
    None,
    /// Running maximum of the first coordinate.
    RunningMax,
    /// Running maximum of `|x|`.
    RunningMaxAbs,
}

type TerminalFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

/// A path functional reduced to (final value, auxiliary state).
#[derive(Clone)]
pub struct ReducedPayoff {
    pub name: String,
    pub aux: AuxKind,
    terminal: TerminalFn,
}

impl fmt::Debug for ReducedPayoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ReducedPayoff({}, {:?})", self.name, self.aux)
    }
}

impl ReducedPayoff {
    pub fn new(
        name: &str,
        aux: AuxKind,
        terminal: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            aux,
            terminal: Arc::new(terminal),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new("constant", AuxKind::None, move |_, _| c)
    }

    pub fn markovian(name: &str, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(name, AuxKind::None, move |x, _| f(x))
    }

    /// Linear in the final value, through `(lo, v_lo)` and `(hi, v_hi)`.
    pub fn boundary_values(lo: f64, hi: f64, v_lo: f64, v_hi: f64) -> Self {
        Self::markovian("boundary_values", move |x| {
            v_lo + (v_hi - v_lo) * (x[0] - lo) / (hi - lo)
        })
    }

    /// `f(final value, sup_t ω_t)`.
    pub fn running_max(name: &str, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(name, AuxKind::RunningMax, move |x, m| f(x[0], m))
    }

    /// `f(sup_t |ω_t|)`.
    pub fn max_abs(name: &str, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(name, AuxKind::RunningMaxAbs, move |_, m| f(m))
    }

    pub fn aux_of(&self, x: &[f64]) -> f64 {
        match self.aux {
            AuxKind::None => 0.0,
            AuxKind::RunningMax => x[0],
            AuxKind::RunningMaxAbs => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    pub fn state_init(&self, history: &PiecewisePath) -> f64 {
        match self.aux {
            AuxKind::None => 0.0,
            AuxKind::RunningMax => history.running_max(),
            AuxKind::RunningMaxAbs => history.max_norm(),
        }
    }

    pub fn state_update(&self, aux: f64, x: &[f64]) -> f64 {
        match self.aux {
            AuxKind::None => 0.0,
            _ => aux.max(self.aux_of(x)),
        }
    }

    pub fn terminal(&self, x: &[f64], aux: f64) -> f64 {
        (self.terminal)(x, aux)
    }

    /// `ξ(ω)` for a whole path.
    pub fn evaluate_path(&self, p: &PiecewisePath) -> f64 {
        self.terminal(p.final_value(), self.state_init(p))
    }

    /// `ξ(ω ⊗ Lin{(1, x)})` for a path ending at `start` with state `aux`.
    pub(crate) fn at_exit(&self, x: f64, aux: f64) -> f64 {
        self.terminal(&[x], self.state_update(aux, &[x]))
    }
}

// ---------------------------------------------------------------------------
// One-dimensional engine.

/// What the optimal policy does at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Boundary,
    Stop,
    Control(usize),
}

/// Nodes `anchor + k h` strictly inside `(lo, hi)`, plus both endpoints.
pub(crate) fn anchored_grid(lo: f64, hi: f64, anchor: f64, h: f64) -> Result<Vec<f64>> {
    if !(lo < anchor && anchor < hi) {
        return Err(LabError::OutsideDomain(format!(
            "anchor {anchor} outside ({lo}, {hi})"
        )));
    }
    let tol = 1e-9 * h;
    let kmin = ((lo - anchor) / h).floor() as i64;
    let kmax = ((hi - anchor) / h).ceil() as i64;
    let mut nodes = vec![lo];
    for k in kmin..=kmax {
        let x = anchor + k as f64 * h;
        if x > lo + tol && x < hi - tol {
            nodes.push(x);
        }
    }
    nodes.push(hi);
    Ok(nodes)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Coeff {
    pm: f64,
    p0: f64,
    pp: f64,
    disc: f64,
    cost_dt: f64,
}

/// One-step coefficients per (node, control); rows for boundary nodes unused.
pub(crate) struct Table {
    n_ctrl: usize,
    c: Vec<Coeff>,
    pub(crate) dt: Vec<f64>,
}

impl Table {
    pub(crate) fn build(x: &[f64], model: &LatticeModel) -> Result<Self> {
        let n = x.len();
        let k = model.controls.len();
        for c in &model.controls {
            if c.vol_sq > model.step.vol_sq_hi * (1.0 + 1e-12)
                || c.drift.abs() > model.step.drift_hi * (1.0 + 1e-12)
            {
                return Err(LabError::Cfl(format!(
                    "control {c:?} exceeds the time-step reference"
                )));
            }
        }
        let zero = Coeff {
            pm: 0.0,
            p0: 1.0,
            pp: 0.0,
            disc: 1.0,
            cost_dt: 0.0,
        };
        let mut c = vec![zero; n * k];
        let mut dts = vec![0.0; n];
        for i in 1..n.saturating_sub(1) {
            let (hm, hp) = (x[i] - x[i - 1], x[i + 1] - x[i]);
            if !(hm > 0.0 && hp > 0.0) {
                return Err(LabError::InvalidInput("grid nodes must increase".into()));
            }
            let dt = model.step.dt(hm, hp);
            dts[i] = dt;
            for (j, ctl) in model.controls.iter().enumerate() {
                let (pm, p0, pp) = transition_weights(hm, hp, dt, ctl);
                if p0 < -1e-12 {
                    return Err(LabError::Cfl(format!("negative weight at node {i}")));
                }
                c[i * k + j] = Coeff {
                    pm,
                    p0: p0.max(0.0),
                    pp,
                    disc: (-ctl.discount * dt).exp(),
                    cost_dt: ctl.cost * dt,
                };
            }
        }
        Ok(Self { n_ctrl: k, c, dt: dts })
    }

    #[inline]
    fn at(&self, node: usize, ctl: usize) -> &Coeff {
        &self.c[node * self.n_ctrl + ctl]
    }
}

pub(crate) struct LineSolution {
    pub v: Vec<f64>,
    pub action: Vec<Action>,
    pub iterations: usize,
    pub residual: f64,
}

fn better(sense: Sense, a: f64, b: f64, tol: f64) -> bool {
    match sense {
        Sense::Sup => a > b + tol,
        Sense::Inf => a < b - tol,
    }
}

/// Thomas algorithm for `a_i v_{i−1} + b_i v_i + c_i v_{i+1} = d_i`.
pub(crate) fn thomas(a: &[f64], b: &[f64], c: &[f64], d: &mut [f64]) {
    let n = d.len();
    if n == 0 {
        return;
    }
    let mut cp = vec![0.0; n];
    cp[0] = c[0] / b[0];
    d[0] /= b[0];
    for i in 1..n {
        let m = b[i] - a[i] * cp[i - 1];
        cp[i] = c[i] / m;
        d[i] = (d[i] - a[i] * d[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        d[i] -= cp[i] * d[i + 1];
    }
}

/// Howard policy iteration on the nodes `offset..offset + len` of the table's
/// grid. The first and last of these nodes are fixed at `left` and `right`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_line(
    table: &Table,
    offset: usize,
    len: usize,
    sense: Sense,
    left: f64,
    right: f64,
    obstacle: Option<&[f64]>,
    warm: Option<&[Action]>,
) -> Result<LineSolution> {
    let m = len;
    let mut v = vec![0.0; m];
    v[0] = left;
    v[m - 1] = right;
    let mut action = vec![Action::Boundary; m];
    if m <= 2 {
        return Ok(LineSolution {
            v,
            action,
            iterations: 0,
            residual: 0.0,
        });
    }
    let k = table.n_ctrl;
    for j in 1..m - 1 {
        action[j] = match warm.map(|w| w[j]) {
            Some(a @ Action::Control(_)) => a,
            Some(Action::Stop) if obstacle.is_some() => Action::Stop,
            _ => Action::Control(0),
        };
    }
    let n = m - 2;
    let (mut a, mut b, mut c, mut d) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut history = Vec::new();
    for it in 1..=PI_MAX_ITER {
        for j in 1..m - 1 {
            let r = j - 1;
            match action[j] {
                Action::Control(ci) => {
                    let q = table.at(offset + j, ci);
                    a[r] = -q.disc * q.pm;
                    b[r] = 1.0 - q.disc * q.p0;
                    c[r] = -q.disc * q.pp;
                    d[r] = q.cost_dt;
                }
                _ => {
                    a[r] = 0.0;
                    b[r] = 1.0;
                    c[r] = 0.0;
                    d[r] = obstacle.map_or(0.0, |o| o[j]);
                }
            }
        }
        d[0] -= a[0] * left;
        a[0] = 0.0;
        d[n - 1] -= c[n - 1] * right;
        c[n - 1] = 0.0;
        thomas(&a, &b, &c, &mut d);
        v[1..m - 1].copy_from_slice(&d);

        let scale = 1.0 + v.iter().fold(0.0f64, |s, x| s.max(x.abs()));
        let tol = 1e-10 * scale;
        let mut changed = false;
        let mut residual = 0.0f64;
        for j in 1..m - 1 {
            let dt = table.dt[offset + j];
            let gain = |act: Action| -> f64 {
                match act {
                    Action::Control(ci) => {
                        let q = table.at(offset + j, ci);
                        (q.cost_dt + q.disc * (q.pm * v[j - 1] + q.p0 * v[j] + q.pp * v[j + 1])
                            - v[j])
                            / dt
                    }
                    Action::Stop => obstacle.map_or(0.0, |o| o[j]) - v[j],
                    Action::Boundary => 0.0,
                }
            };
            let cur = gain(action[j]);
            let mut best = action[j];
            let mut best_gain = cur;
            for ci in 0..k {
                let g = gain(Action::Control(ci));
                if better(sense, g, best_gain, tol) {
                    best = Action::Control(ci);
                    best_gain = g;
                }
            }
            if obstacle.is_some() {
                let g = gain(Action::Stop) / dt;
                if better(sense, g, best_gain, tol) || (g == best_gain && best != Action::Stop) {
                    best = Action::Stop;
                    best_gain = g;
                }
            }
            // Residual of the optimal operator at the evaluated values.
            let opt_gain = match obstacle {
                Some(o) => {
                    let cont = (0..k).map(|ci| gain(Action::Control(ci)));
                    let cont = match sense {
                        Sense::Sup => cont.fold(f64::NEG_INFINITY, f64::max),
                        Sense::Inf => cont.fold(f64::INFINITY, f64::min),
                    };
                    let stop = (o[j] - v[j]) / dt;
                    match sense {
                        Sense::Sup => cont.max(stop),
                        Sense::Inf => cont.min(stop),
                    }
                }
                None => best_gain,
            };
            residual = residual.max(opt_gain.abs());
            if best != action[j] {
                action[j] = best;
                changed = true;
            }
        }
        history.push(residual);
        if !changed {
            return Ok(LineSolution {
                v,
                action,
                iterations: it,
                residual,
            });
        }
    }
    let tail = history.iter().rev().take(5).cloned().collect();
    Err(LabError::PolicyCycling(tail))
}

// ---------------------------------------------------------------------------
// Value fields.

/// Geometry of the nodes carrying a value field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Geometry {
    /// Sorted nodes; the first and last are boundary nodes.
    Line(Vec<f64>),
    /// Box lattice `origin + h · (k_min + idx)`; `inside` marks interior nodes.
    Cartesian {
        origin: Vec<f64>,
        h: f64,
        kmin: Vec<i64>,
        shape: Vec<usize>,
        inside: Vec<bool>,
    },
}

/// Values of a dynamic program over (node, auxiliary level).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatticeField {
    pub geometry: Geometry,
    pub aux: AuxKind,
    /// Auxiliary levels, ascending (a single dummy level when Markovian).
    pub levels: Vec<f64>,
    /// `values[level][node]`.
    pub values: Vec<Vec<f64>>,
    pub actions: Vec<Vec<Action>>,
    pub controls: Vec<ControlPoint>,
    /// Value at the history's final point and state.
    pub start_value: f64,
    pub start: Vec<f64>,
    pub start_aux: f64,
    pub iterations: usize,
    pub residual: f64,
}

impl LatticeField {
    pub fn nodes(&self) -> &[f64] {
        match &self.geometry {
            Geometry::Line(x) => x,
            Geometry::Cartesian { .. } => &[],
        }
    }

    fn aux_of(&self, x: &[f64]) -> f64 {
        match self.aux {
            AuxKind::None => 0.0,
            AuxKind::RunningMax => x[0],
            AuxKind::RunningMaxAbs => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    /// Level index for a (snapped-up) auxiliary value.
    pub fn level_of(&self, aux: f64) -> usize {
        if self.aux == AuxKind::None {
            return 0;
        }
        let tol = 1e-12 * (1.0 + aux.abs());
        let k = self.levels.partition_point(|&l| l < aux - tol);
        k.min(self.levels.len() - 1)
    }

    /// Interpolated value at `x` with auxiliary state `aux`.
    pub fn value_at(&self, x: &[f64], aux: f64) -> f64 {
        let a = if self.aux == AuxKind::None {
            0.0
        } else {
            aux.max(self.aux_of(x))
        };
        let vals = &self.values[self.level_of(a)];
        match &self.geometry {
            Geometry::Line(nodes) => interp(nodes, vals, x[0]),
            Geometry::Cartesian {
                origin,
                h,
                kmin,
                shape,
                ..
            } => multilinear(origin, *h, kmin, shape, vals, x),
        }
    }

    /// Optimal control at the node nearest to `x` (interior nodes only).
    pub fn control_at(&self, x: f64, aux: f64) -> Option<ControlPoint> {
        let nodes = self.nodes();
        if nodes.len() < 3 {
            return None;
        }
        let a = if self.aux == AuxKind::None { 0.0 } else { aux.max(self.aux_of(&[x])) };
        let lvl = self.level_of(a);
        let k = nodes.partition_point(|&s| s < x);
        let i = if k == 0 {
            1
        } else if k >= nodes.len() {
            nodes.len() - 2
        } else if x - nodes[k - 1] <= nodes[k] - x {
            k - 1
        } else {
            k
        };
        let i = i.clamp(1, nodes.len() - 2);
        match self.actions[lvl][i] {
            Action::Control(c) => Some(self.controls[c]),
            _ => None,
        }
    }

    /// CSV rows `x, aux, value` (one row per node and level).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,aux,value\n");
        match &self.geometry {
            Geometry::Line(nodes) => {
                for (lvl, vals) in self.values.iter().enumerate() {
                    for (x, v) in nodes.iter().zip(vals) {
                        out.push_str(&format!("{x},{},{v}\n", self.levels[lvl]));
                    }
                }
            }
            Geometry::Cartesian {
                origin,
                h,
                kmin,
                shape,
                ..
            } => {
                out = String::from("coords,aux,value\n");
                for (idx, v) in self.values[0].iter().enumerate() {
                    let p = cart_point(origin, *h, kmin, shape, idx);
                    let s: Vec<String> = p.iter().map(|c| c.to_string()).collect();
                    out.push_str(&format!("{},0,{v}\n", s.join(" ")));
                }
            }
        }
        out
    }
}

pub(crate) fn interp(nodes: &[f64], vals: &[f64], x: f64) -> f64 {
    let n = nodes.len();
    if x <= nodes[0] {
        return vals[0];
    }
    if x >= nodes[n - 1] {
        return vals[n - 1];
    }
    let k = nodes.partition_point(|&s| s <= x);
    let (x0, x1) = (nodes[k - 1], nodes[k]);
    let w = (x - x0) / (x1 - x0);
    vals[k - 1] + w * (vals[k] - vals[k - 1])
}

fn cart_point(origin: &[f64], h: f64, kmin: &[i64], shape: &[usize], mut idx: usize) -> Vec<f64> {
    let mut p = vec![0.0; shape.len()];
    for ax in (0..shape.len()).rev() {
        let i = idx % shape[ax];
        idx /= shape[ax];
        p[ax] = origin[ax] + h * (kmin[ax] + i as i64) as f64;
    }
    p
}

fn cart_index(shape: &[usize], multi: &[usize]) -> usize {
    multi.iter().zip(shape).fold(0, |acc, (i, n)| acc * n + i)
}

fn multilinear(
    origin: &[f64],
    h: f64,
    kmin: &[i64],
    shape: &[usize],
    vals: &[f64],
    x: &[f64],
) -> f64 {
    let d = shape.len();
    let mut base = vec![0usize; d];
    let mut frac = vec![0.0; d];
    for ax in 0..d {
        let s = (x[ax] - origin[ax]) / h - kmin[ax] as f64;
        let s = s.clamp(0.0, (shape[ax] - 1) as f64);
        let b = (s.floor() as usize).min(shape[ax].saturating_sub(2));
        base[ax] = b;
        frac[ax] = s - b as f64;
    }
    let mut total = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut m = base.clone();
        for ax in 0..d {
            if corner >> ax & 1 == 1 {
                m[ax] = (m[ax] + 1).min(shape[ax] - 1);
                w *= frac[ax];
            } else {
                w *= 1.0 - frac[ax];
            }
        }
        if w != 0.0 {
            total += w * vals[cart_index(shape, &m)];
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Stationary dynamic programs.

struct Problem<'a> {
    model: &'a LatticeModel,
    sense: Sense,
    payoff: &'a ReducedPayoff,
    stop_domain: &'a ConvexDomain,
    history: &'a PiecewisePath,
    stopping: bool,
}

fn solve(p: &Problem) -> Result<LatticeField> {
    let d = p.stop_domain.dim();
    if p.history.dim() != d {
        return Err(LabError::DimensionMismatch {
            expected: d,
            found: p.history.dim(),
        });
    }
    if d == 1 {
        solve_1d(p)
    } else {
        solve_nd(p)
    }
}

fn solve_1d(p: &Problem) -> Result<LatticeField> {
    let (lo, hi) = p.stop_domain.as_interval()?;
    let start = p.history.final_value()[0];
    let x = anchored_grid(lo, hi, start, p.model.h)?;
    let start_aux = p.payoff.state_init(p.history);
    let table = Table::build(&x, p.model)?;
    let mut field = solve_levels(&x, &table, p.model, p.sense, p.payoff, &[start_aux], p.stopping)?;
    field.start = vec![start];
    field.start_aux = start_aux;
    field.start_value = field.value_at(&[start], start_aux);
    Ok(field)
}

/// Solves every auxiliary level, highest first. `extra_levels` are added to
/// the node levels (e.g. the running maximum of a history).
pub(crate) fn solve_levels(
    x: &[f64],
    table: &Table,
    model: &LatticeModel,
    sense: Sense,
    payoff: &ReducedPayoff,
    extra_levels: &[f64],
    stopping: bool,
) -> Result<LatticeField> {
    let n = x.len();
    let f = |xi: f64| payoff.aux_of(&[xi]);
    let levels: Vec<f64> = if payoff.aux == AuxKind::None {
        vec![0.0]
    } else {
        let mut l: Vec<f64> = (1..n - 1).map(|i| f(x[i])).collect();
        l.extend_from_slice(extra_levels);
        l.sort_by(f64::total_cmp);
        l.dedup_by(|a, b| (*a - *b).abs() <= 1e-13 * (1.0 + b.abs()));
        l
    };
    let lvl_of = |a: f64| -> usize {
        let tol = 1e-12 * (1.0 + a.abs());
        levels.partition_point(|&l| l < a - tol).min(levels.len() - 1)
    };
    let nl = levels.len();
    let mut values = vec![vec![0.0; n]; nl];
    let mut actions = vec![vec![Action::Boundary; n]; nl];
    let mut iterations = 0;
    let mut residual = 0.0f64;
    let mut warm: Option<Vec<Action>> = None;
    for li in (0..nl).rev() {
        let m = levels[li];
        let markov = payoff.aux == AuxKind::None;
        let active: Vec<usize> = (1..n - 1)
            .filter(|&i| markov || f(x[i]) <= m + 1e-12 * (1.0 + m.abs()))
            .collect();
        let term = |xb: f64| -> f64 {
            if markov {
                payoff.terminal(&[xb], 0.0)
            } else {
                payoff.terminal(&[xb], m.max(f(xb)))
            }
        };
        values[li][0] = term(x[0]);
        values[li][n - 1] = term(x[n - 1]);
        if let (Some(&a), Some(&b)) = (active.first(), active.last()) {
            if b - a + 1 != active.len() {
                return Err(LabError::UnsupportedPayoff(
                    "auxiliary sublevel sets must be intervals".into(),
                ));
            }
            let side = |j: usize| -> f64 {
                if j == 0 || j == n - 1 {
                    term(x[j])
                } else {
                    values[lvl_of(f(x[j]))][j]
                }
            };
            let (left, right) = (side(a - 1), side(b + 1));
            let obstacle: Option<Vec<f64>> = stopping.then(|| {
                (a - 1..=b + 1)
                    .map(|j| {
                        if markov {
                            payoff.terminal(&[x[j]], 0.0)
                        } else {
                            payoff.terminal(&[x[j]], m.max(f(x[j])))
                        }
                    })
                    .collect()
            });
            let warm_slice: Option<Vec<Action>> = warm.as_ref().map(|w| w[a - 1..=b + 1].to_vec());
            let sol = solve_line(
                table,
                a - 1,
                b - a + 3,
                sense,
                left,
                right,
                obstacle.as_deref(),
                warm_slice.as_deref(),
            )?;
            iterations += sol.iterations;
            residual = residual.max(sol.residual);
            for (j, i) in (a..=b).enumerate() {
                values[li][i] = sol.v[j + 1];
                actions[li][i] = sol.action[j + 1];
            }
            let mut w = vec![Action::Control(0); n];
            w[a - 1..=b + 1].copy_from_slice(&sol.action);
            warm = Some(w);
        }
        // Inactive interior nodes carry the value of their own level.
        for i in 1..n - 1 {
            if !markov && f(x[i]) > m + 1e-12 * (1.0 + m.abs()) {
                let l2 = lvl_of(f(x[i]));
                values[li][i] = values[l2][i];
                actions[li][i] = actions[l2][i];
            }
        }
    }
    Ok(LatticeField {
        geometry: Geometry::Line(x.to_vec()),
        aux: payoff.aux,
        levels,
        values,
        actions,
        controls: model.controls.clone(),
        start_value: f64::NAN,
        start: vec![],
        start_aux: 0.0,
        iterations,
        residual,
    })
}

/// Value iteration on a box lattice; drift must vanish, payoffs Markovian.
fn solve_nd(p: &Problem) -> Result<LatticeField> {
    let d = p.stop_domain.dim();
    if p.model.controls.iter().any(|c| c.drift != 0.0) {
        return Err(LabError::Unsupported(
            "dimension >= 2 requires a zero drift band".into(),
        ));
    }
    if p.payoff.aux != AuxKind::None {
        return Err(LabError::UnsupportedPayoff(
            "path-dependent payoffs need dimension 1".into(),
        ));
    }
    let h = p.model.h;
    let start = p.history.final_value().to_vec();
    if !p.stop_domain.contains(&start) {
        return Err(LabError::OutsideDomain(format!("{start:?}")));
    }
    let (blo, bhi) = p
        .stop_domain
        .bounding_box()
        .ok_or_else(|| LabError::InvalidInput("unbounded domain".into()))?;
    let mut kmin = vec![0i64; d];
    let mut shape = vec![0usize; d];
    for ax in 0..d {
        let k0 = ((blo[ax] - start[ax]) / h).floor() as i64 - 1;
        let k1 = ((bhi[ax] - start[ax]) / h).ceil() as i64 + 1;
        kmin[ax] = k0;
        shape[ax] = (k1 - k0 + 1) as usize;
    }
    let total: usize = shape.iter().product();
    let pts: Vec<Vec<f64>> = (0..total)
        .map(|i| cart_point(&start, h, &kmin, &shape, i))
        .collect();
    let inside: Vec<bool> = pts.iter().map(|x| p.stop_domain.contains(x)).collect();
    let terminal: Vec<f64> = pts.iter().map(|x| p.payoff.terminal(x, 0.0)).collect();
    let mut strides = vec![1usize; d];
    for ax in (0..d - 1).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }

    // Vertex controls: diagonal volatility per axis at the band ends.
    let vol_lo = p.model.controls.iter().map(|c| c.vol_sq).fold(f64::INFINITY, f64::min);
    let vol_hi = p.model.step.vol_sq_hi;
    let discs: Vec<(f64, f64)> = {
        let mut v: Vec<(f64, f64)> = p.model.controls.iter().map(|c| (c.discount, c.cost)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        v.dedup();
        v
    };
    let vols = endpoints(vol_hi, vol_lo);
    let mut vertex: Vec<Vec<f64>> = vec![vec![]];
    for _ in 0..d {
        vertex = vertex
            .into_iter()
            .flat_map(|v| {
                vols.iter().map(move |s| {
                    let mut w = v.clone();
                    w.push(*s);
                    w
                })
            })
            .collect();
    }
    let dt = h * h / (d as f64 * vol_hi);

    let mut v: Vec<f64> = (0..total)
        .map(|i| if inside[i] { 0.0 } else { terminal[i] })
        .collect();
    let mut next = v.clone();
    let mut iterations = 0;
    let mut change = f64::INFINITY;
    let stopping = p.stopping;
    while change > VI_TOL {
        iterations += 1;
        if iterations > VI_MAX_ITER {
            return Err(LabError::NonConvergence {
                iterations,
                residual: change,
            });
        }
        next.par_iter_mut().enumerate().for_each(|(i, out)| {
            if !inside[i] {
                return;
            }
            let mut best = match p.sense {
                Sense::Sup => f64::NEG_INFINITY,
                Sense::Inf => f64::INFINITY,
            };
            for vol in &vertex {
                let mut avg = 0.0;
                let mut stay = 1.0;
                for ax in 0..d {
                    let w = vol[ax] * dt / (2.0 * h * h);
                    avg += w * (v[i + strides[ax]] + v[i - strides[ax]]);
                    stay -= 2.0 * w;
                }
                avg += stay * v[i];
                for &(b, cost) in &discs {
                    let q = cost * dt + (-b * dt).exp() * avg;
                    best = match p.sense {
                        Sense::Sup => best.max(q),
                        Sense::Inf => best.min(q),
                    };
                }
            }
            if stopping {
                best = match p.sense {
                    Sense::Sup => best.max(terminal[i]),
                    Sense::Inf => best.min(terminal[i]),
                };
            }
            *out = best;
        });
        change = v
            .iter()
            .zip(&next)
            .fold(0.0f64, |s, (a, b)| s.max((a - b).abs()));
        std::mem::swap(&mut v, &mut next);
    }
    let actions = vec![inside
        .iter()
        .enumerate()
        .map(|(i, &ins)| {
            if !ins {
                Action::Boundary
            } else if stopping && (v[i] - terminal[i]).abs() <= 1e-9 {
                Action::Stop
            } else {
                Action::Control(0)
            }
        })
        .collect()];
    let mut field = LatticeField {
        geometry: Geometry::Cartesian {
            origin: start.clone(),
            h,
            kmin,
            shape,
            inside,
        },
        aux: AuxKind::None,
        levels: vec![0.0],
        values: vec![v],
        actions,
        controls: p.model.controls.clone(),
        start_value: f64::NAN,
        start: start.clone(),
        start_aux: 0.0,
        iterations,
        residual: change,
    };
    field.start_value = field.value_at(&start, 0.0);
    Ok(field)
}

/// `sup` over the control lattice of `E[∫ e^{−∫b} cost + e^{−∫b} ξ]`, stopped
/// at the exit of `stop_domain`, started from the history's final point.
pub fn sup_expectation(
    model: &LatticeModel,
    payoff: &ReducedPayoff,
    stop_domain: &ConvexDomain,
    running_cost: f64,
    history: &PiecewisePath,
) -> Result<LatticeField> {
    let m = model.with_running_cost(running_cost);
    solve(&Problem {
        model: &m,
        sense: Sense::Sup,
        payoff,
        stop_domain,
        history,
        stopping: false,
    })
}

/// Mirror of [`sup_expectation`] with the infimum over controls.
pub fn inf_expectation(
    model: &LatticeModel,
    payoff: &ReducedPayoff,
    stop_domain: &ConvexDomain,
    running_cost: f64,
    history: &PiecewisePath,
) -> Result<LatticeField> {
    let m = model.with_running_cost(running_cost);
    solve(&Problem {
        model: &m,
        sense: Sense::Inf,
        payoff,
        stop_domain,
        history,
        stopping: false,
    })
}

/// Envelope `Y = max(obstacle, sup one-step continuation)` and its stopping region.
#[derive(Debug, Clone)]
pub struct SnellResult {
    pub field: LatticeField,
    /// `stop_region[level][node]`.
    pub stop_region: Vec<Vec<bool>>,
}

fn snell(
    model: &LatticeModel,
    obstacle: &ReducedPayoff,
    stop_domain: &ConvexDomain,
    history: &PiecewisePath,
    sense: Sense,
) -> Result<SnellResult> {
    let field = solve(&Problem {
        model,
        sense,
        payoff: obstacle,
        stop_domain,
        history,
        stopping: true,
    })?;
    let stop_region = match &field.geometry {
        Geometry::Line(x) => field
            .values
            .iter()
            .enumerate()
            .map(|(li, vals)| {
                let m = field.levels[li];
                x.iter()
                    .zip(vals)
                    .map(|(&xi, &y)| {
                        let a = if obstacle.aux == AuxKind::None { 0.0 } else { m.max(obstacle.aux_of(&[xi])) };
                        (y - obstacle.terminal(&[xi], a)).abs() <= 1e-10 * (1.0 + y.abs())
                    })
                    .collect()
            })
            .collect(),
        Geometry::Cartesian { .. } => field
            .actions
            .iter()
            .map(|lv| lv.iter().map(|a| matches!(a, Action::Stop | Action::Boundary)).collect())
            .collect(),
    };
    Ok(SnellResult { field, stop_region })
}

pub fn snell_sup(
    model: &LatticeModel,
    obstacle: &ReducedPayoff,
    stop_domain: &ConvexDomain,
    history: &PiecewisePath,
) -> Result<SnellResult> {
    snell(model, obstacle, stop_domain, history, Sense::Sup)
}

pub fn snell_inf(
    model: &LatticeModel,
    obstacle: &ReducedPayoff,
    stop_domain: &ConvexDomain,
    history: &PiecewisePath,
) -> Result<SnellResult> {
    snell(model, obstacle, stop_domain, history, Sense::Inf)
}

// ---------------------------------------------------------------------------
// Capacities.

/// Events whose capacity `sup_P P[A]` the lattice can evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CapacityEvent {
    Never,
    Always,
    /// `{h_D < T}` for the exit time of the domain.
    ExitBefore { horizon: f64 },
    /// `{h_n < h_D}`: `n` successive exits of an `eps`-ball happen before
    /// the exit of the domain.
    CascadeBeforeExit { eps: f64, steps: usize },
}

/// `sup_P P[event]` for the chain started at `start` in `domain`.
pub fn capacity(
    model: &LatticeModel,
    domain: &ConvexDomain,
    start: f64,
    event: &CapacityEvent,
) -> Result<f64> {
    match event {
        CapacityEvent::Never => Ok(0.0),
        CapacityEvent::Always => Ok(1.0),
        CapacityEvent::ExitBefore { horizon } => exit_before(model, domain, start, *horizon),
        CapacityEvent::CascadeBeforeExit { eps, steps } => {
            let (lo, hi) = domain.as_interval()?;
            let h = model.h;
            let per = (eps / h).round().max(1.0);
            let hs = eps / per;
            let x = anchored_grid(lo, hi, start, hs)?;
            let m2 = LatticeModel { h: hs, ..model.clone() };
            let table = Table::build(&x, &m2)?;
            let mut memo = std::collections::HashMap::new();
            let start_idx = nearest(&x, start);
            cascade_capacity(&x, &table, *eps, *steps, start_idx, &mut memo)
        }
    }
}

fn nearest(x: &[f64], v: f64) -> usize {
    let k = x.partition_point(|&s| s < v);
    if k == 0 {
        0
    } else if k >= x.len() || v - x[k - 1] <= x[k] - v {
        k - 1
    } else {
        k
    }
}

/// Index range `[a, b]` of the sub-line `(x_c − eps, x_c + eps) ∩ (lo, hi)`
/// with flags telling whether each end lies on the sphere strictly inside the domain.
pub(crate) fn local_window(x: &[f64], c: usize, eps: f64) -> (usize, usize, bool, bool) {
    let tol = 1e-9 * eps;
    let xc = x[c];
    let a = (0..c).rev().find(|&j| xc - x[j] >= eps - tol).unwrap_or(0);
    let b = (c + 1..x.len()).find(|&j| x[j] - xc >= eps - tol).unwrap_or(x.len() - 1);
    let left_sphere = a > 0 && (xc - x[a] - eps).abs() <= tol;
    let right_sphere = b < x.len() - 1 && (x[b] - xc - eps).abs() <= tol;
    (a, b, left_sphere, right_sphere)
}

fn cascade_capacity(
    x: &[f64],
    table: &Table,
    eps: f64,
    steps: usize,
    c: usize,
    memo: &mut std::collections::HashMap<(usize, usize), f64>,
) -> Result<f64> {
    if steps == 0 {
        return Ok(1.0);
    }
    if let Some(v) = memo.get(&(c, steps)) {
        return Ok(*v);
    }
    let (a, b, ls, rs) = local_window(x, c, eps);
    let left = if ls {
        cascade_capacity(x, table, eps, steps - 1, a, memo)?
    } else {
        0.0
    };
    let right = if rs {
        cascade_capacity(x, table, eps, steps - 1, b, memo)?
    } else {
        0.0
    };
    let sol = solve_line(table, a, b - a + 1, Sense::Sup, left, right, None, None)?;
    let v = sol.v[c - a];
    memo.insert((c, steps), v);
    Ok(v)
}

fn exit_before(model: &LatticeModel, domain: &ConvexDomain, start: f64, horizon: f64) -> Result<f64> {
    let (lo, hi) = domain.as_interval()?;
    let x = anchored_grid(lo, hi, start, model.h)?;
    let n = x.len();
    let dt_min = (1..n - 1)
        .map(|i| model.step.dt(x[i] - x[i - 1], x[i + 1] - x[i]))
        .fold(f64::INFINITY, f64::min);
    let steps = (horizon / dt_min).ceil().max(1.0) as usize;
    let dt = horizon / steps as f64;
    let mut w: Vec<Vec<(f64, f64, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        if i == 0 || i == n - 1 {
            w.push(vec![]);
            continue;
        }
        let (hm, hp) = (x[i] - x[i - 1], x[i + 1] - x[i]);
        w.push(
            model
                .controls
                .iter()
                .map(|c| transition_weights(hm, hp, dt, c))
                .collect(),
        );
    }
    let mut v = vec![0.0; n];
    v[0] = 1.0;
    v[n - 1] = 1.0;
    let mut next = v.clone();
    for _ in 0..steps {
        for i in 1..n - 1 {
            next[i] = w[i]
                .iter()
                .map(|&(pm, p0, pp)| pm * v[i - 1] + p0 * v[i] + pp * v[i + 1])
                .fold(0.0, f64::max);
        }
        std::mem::swap(&mut v, &mut next);
    }
    Ok(interp(&x, &v, start))
}

/// `sup_P E|h^{x₁} − h^{x₂}|` for two copies of the same controlled motion
/// started at `x1` and `x2` in `domain`.
pub fn hitting_time_gap(model: &LatticeModel, domain: &ConvexDomain, x1: f64, x2: f64) -> Result<f64> {
    let (lo, hi) = domain.as_interval()?;
    let (a, b) = (x1.min(x2), x1.max(x2));
    if !(lo < a && b < hi) {
        return Err(LabError::OutsideDomain(format!("{x1}, {x2}")));
    }
    let delta = b - a;
    if delta == 0.0 {
        return Ok(0.0);
    }
    let m = model.undiscounted_view();
    let mid = PiecewisePath::lin1(&[(1.0, 0.5 * (a + b))])?;
    let zero_payoff = ReducedPayoff::constant(0.0);
    let exit = sup_expectation(&m, &zero_payoff, domain, 1.0, &mid)?;
    let left = exit.value_at(&[lo + delta], 0.0);
    let right = exit.value_at(&[hi - delta], 0.0);
    // Common motion B started at 0 in (lo − a, hi − b).
    let inner = ConvexDomain::interval(lo - a, hi - b)?;
    let pay = ReducedPayoff::boundary_values(lo - a, hi - b, left, right);
    let v = sup_expectation(&m, &pay, &inner, 0.0, &PiecewisePath::zero(1))?;
    Ok(v.start_value)
}

impl LatticeModel {
    fn undiscounted_view(&self) -> Self {
        let mut m = self.clone();
        for c in &mut m.controls {
            c.discount = 0.0;
            c.cost = 0.0;
        }
        m.controls.dedup();
        m
    }
}

/// Closed-form `sup_P E[h_D]` on `D = (−r, r)` under `|α| ≤ L`, `β² ∈ [2/L, 2L]`.
pub fn exit_time_closed_form(lip: f64, r: f64, x: f64) -> Result<f64> {
    if !(lip > 0.0 && r > 0.0) {
        return Err(LabError::InvalidInput("need L > 0 and r > 0".into()));
    }
    if x.abs() > r {
        return Err(LabError::OutsideDomain(format!("|{x}| > {r}")));
    }
    let ax = x.abs();
    let l2 = lip * lip;
    Ok(((l2 * r).exp() - (l2 * ax).exp()) / (l2 * lip) - (r - ax) / lip)
}

// ---------------------------------------------------------------------------
// Finite stopping trees.

/// A non-recombining binary tree: from each node the state moves up or down;
/// the up-probability is chosen from `probs` by the controller.
#[derive(Debug, Clone)]
pub struct StoppingTree {
    pub depth: usize,
    pub probs: Vec<f64>,
    /// Obstacle per node, level by level (`2^k` nodes at level `k`).
    pub obstacle: Vec<Vec<f64>>,
}

impl StoppingTree {
    /// Obstacle given as a function of the walk position (±`step` moves).
    pub fn from_walk(depth: usize, step: f64, probs: Vec<f64>, f: impl Fn(f64) -> f64) -> Self {
        let obstacle = (0..=depth)
            .map(|k| {
                (0..1usize << k)
                    .map(|idx| {
                        let ups = idx.count_ones() as f64;
                        f(step * (2.0 * ups - k as f64))
                    })
                    .collect()
            })
            .collect();
        Self {
            depth,
            probs,
            obstacle,
        }
    }

    fn children(idx: usize) -> (usize, usize) {
        (2 * idx + 1, 2 * idx)
    }

    /// Snell envelope by backward induction; returns the root value and the
    /// stopping region.
    pub fn snell(&self, sense: Sense) -> (f64, Vec<Vec<bool>>) {
        let mut y = self.obstacle[self.depth].clone();
        let mut region = vec![vec![true; 1 << self.depth]];
        for k in (0..self.depth).rev() {
            let mut next = Vec::with_capacity(1 << k);
            let mut stop = Vec::with_capacity(1 << k);
            for idx in 0..1usize << k {
                let (u, d) = Self::children(idx);
                let conts = self.probs.iter().map(|p| p * y[u] + (1.0 - p) * y[d]);
                let cont = match sense {
                    Sense::Sup => conts.fold(f64::NEG_INFINITY, f64::max),
                    Sense::Inf => conts.fold(f64::INFINITY, f64::min),
                };
                let o = self.obstacle[k][idx];
                let (val, s) = match sense {
                    Sense::Sup => (o.max(cont), o >= cont),
                    Sense::Inf => (o.min(cont), o <= cont),
                };
                next.push(val);
                stop.push(s);
            }
            y = next;
            region.push(stop);
        }
        region.reverse();
        (y[0], region)
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo.

/// Feedback control used by the simulator.
pub trait ControlPolicy: Send + Sync {
    fn control(&self, x: f64, aux: f64) -> ControlPoint;
}

impl ControlPolicy for ControlPoint {
    fn control(&self, _: f64, _: f64) -> ControlPoint {
        *self
    }
}

/// Policy given by a closure.
pub struct FnPolicy<F>(pub F);

impl<F: Fn(f64, f64) -> ControlPoint + Send + Sync> ControlPolicy for FnPolicy<F> {
    fn control(&self, x: f64, aux: f64) -> ControlPoint {
        (self.0)(x, aux)
    }
}

/// The argmax controls of a solved field, looked up at the nearest node.
pub struct FieldPolicy<'a> {
    pub field: &'a LatticeField,
    pub fallback: ControlPoint,
}

impl ControlPolicy for FieldPolicy<'_> {
    fn control(&self, x: f64, aux: f64) -> ControlPoint {
        self.field.control_at(x, aux).unwrap_or(self.fallback)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McOptions {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// Paths still alive at this time abort the run.
    pub max_time: f64,
}

impl McOptions {
    pub fn new(n_paths: usize, dt: f64, seed: u64) -> Self {
        Self {
            n_paths,
            dt,
            seed,
            max_time: 1e4,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub seed: u64,
}

const MC_CHUNK: usize = 1024;

/// Discounted payoff average under a fixed admissible feedback control:
/// Euler steps with a Brownian-bridge exit correction.
pub fn mc_lower_bound(
    bounds: &ControlBounds,
    policy: &dyn ControlPolicy,
    payoff: &ReducedPayoff,
    stop_domain: &ConvexDomain,
    history: &PiecewisePath,
    opts: &McOptions,
) -> Result<McEstimate> {
    let samples = mc_samples(bounds, policy, payoff, stop_domain, history, opts, &[])?;
    let vals: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let (mean, se) = mean_se(&vals);
    Ok(McEstimate {
        estimate: mean,
        std_error: se,
        n_paths: opts.n_paths,
        seed: opts.seed,
    })
}

pub(crate) fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// A sampling time and the value function `(x, aux) ↦ u` read there.
pub(crate) type Checkpoint<'a> = (f64, &'a (dyn Fn(f64, f64) -> f64 + Sync));

/// Discounted payoff of one path and its value process at the checkpoints.
type PathSample = (f64, Vec<f64>);

/// Per-path discounted payoff, plus the discounted value process
/// `e^{−∫b}(u(X_t) or ξ) + ∫ e^{−∫b} cost` recorded at `checkpoints` via `value`.
pub(crate) fn mc_samples(
    bounds: &ControlBounds,
    policy: &dyn ControlPolicy,
    payoff: &ReducedPayoff,
    stop_domain: &ConvexDomain,
    history: &PiecewisePath,
    opts: &McOptions,
    checkpoints: &[Checkpoint],
) -> Result<Vec<PathSample>> {
    if stop_domain.dim() != 1 {
        return Err(LabError::Unsupported("simulation is one-dimensional".into()));
    }
    if opts.n_paths == 0 || !(opts.dt > 0.0) {
        return Err(LabError::InvalidInput("need n_paths > 0 and dt > 0".into()));
    }
    let (lo, hi) = stop_domain.as_interval()?;
    let x0 = history.final_value()[0];
    if !(lo < x0 && x0 < hi) {
        return Err(LabError::BoundaryReached);
    }
    let aux0 = payoff.state_init(history);
    let n_chunks = opts.n_paths.div_ceil(MC_CHUNK);
    let chunks: Vec<Result<Vec<PathSample>>> = (0..n_chunks)
        .into_par_iter()
        .map(|ch| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(ch as u64);
            let count = MC_CHUNK.min(opts.n_paths - ch * MC_CHUNK);
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                out.push(simulate_path(
                    bounds, policy, payoff, lo, hi, x0, aux0, opts, checkpoints, &mut rng,
                )?);
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(opts.n_paths);
    for c in chunks {
        all.extend(c?);
    }
    Ok(all)
}

#[allow(clippy::too_many_arguments)]
fn simulate_path(
    bounds: &ControlBounds,
    policy: &dyn ControlPolicy,
    payoff: &ReducedPayoff,
    lo: f64,
    hi: f64,
    x0: f64,
    aux0: f64,
    opts: &McOptions,
    checkpoints: &[Checkpoint],
    rng: &mut ChaCha8Rng,
) -> Result<PathSample> {
    let dt = opts.dt;
    let (mut x, mut aux, mut t) = (x0, aux0, 0.0);
    let mut log_disc = 0.0_f64; // ∫ b
    let mut running = 0.0_f64; // ∫ e^{−∫b} cost
    let mut marks = Vec::with_capacity(checkpoints.len());
    let mut next_mark = 0;
    loop {
        while next_mark < checkpoints.len() && checkpoints[next_mark].0 <= t + 1e-12 {
            marks.push(running + (-log_disc).exp() * (checkpoints[next_mark].1)(x, aux));
            next_mark += 1;
        }
        let c = policy.control(x, aux);
        if !bounds.contains(&c) {
            return Err(LabError::PolicyOutOfBounds(format!("{c:?} at x = {x}")));
        }
        let z: f64 = rng.sample(StandardNormal);
        let sd = (c.vol_sq * dt).sqrt();
        let xn = x + c.drift * dt + sd * z;
        // Fraction of the step before exit, and the exit point.
        let mut exit: Option<(f64, f64)> = None;
        if xn >= hi || xn <= lo {
            let b = if xn >= hi { hi } else { lo };
            exit = Some(((b - x) / (xn - x), b));
        } else if c.vol_sq > 0.0 {
            let var = c.vol_sq * dt;
            let p_hi = (-2.0 * (hi - x) * (hi - xn) / var).exp();
            let p_lo = (-2.0 * (x - lo) * (xn - lo) / var).exp();
            let u: f64 = rng.gen();
            if u < p_hi {
                exit = Some((0.5, hi));
            } else if u < p_hi + p_lo {
                exit = Some((0.5, lo));
            }
        }
        let frac = exit.map_or(1.0, |e| e.0);
        let tau = frac * dt;
        running += (-log_disc).exp() * c.cost * discounted_length(c.discount, tau);
        log_disc += c.discount * tau;
        t += tau;
        if let Some((_, b)) = exit {
            let value = running + (-log_disc).exp() * payoff.at_exit(b, aux);
            while next_mark < checkpoints.len() {
                marks.push(value);
                next_mark += 1;
            }
            return Ok((value, marks));
        }
        x = xn;
        aux = payoff.state_update(aux, &[x]);
        if t > opts.max_time {
            return Err(LabError::NonConvergence {
                iterations: (t / dt) as usize,
                residual: f64::NAN,
            });
        }
    }
}

/// `∫_0^τ e^{−b s} ds`.
fn discounted_length(b: f64, tau: f64) -> f64 {
    if b * tau < 1e-12 {
        tau
    } else {
        -(-b * tau).exp_m1() / b
    }
}

/// Source-aware helper: the HJB source of a frozen generator as running cost.
pub fn frozen_cost(form: &HjbForm, omega: &PiecewisePath) -> f64 {
    match &form.source {
        Source::Constant(c) => *c,
        Source::Path { f, .. } => f(omega),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(lo: f64, hi: f64) -> ConvexDomain {
        ConvexDomain::interval(lo, hi).unwrap()
    }

    fn exit_model(h: f64) -> LatticeModel {
        LatticeModel::new(&ControlBounds::new(1.0, 2.0, 2.0, 0.0, 0.0).unwrap(), h).unwrap()
    }

    #[test]
    fn constant_payoff_is_fixed_point() {
        let m = LatticeModel::new(&ControlBounds::new(0.5, 0.5, 1.5, 0.0, 0.0).unwrap(), 0.05)
            .unwrap();
        let f = sup_expectation(&m, &ReducedPayoff::constant(2.5), &iv(-1.0, 1.0), 0.0, &PiecewisePath::zero(1))
            .unwrap();
        for v in &f.values[0] {
            assert!((v - 2.5).abs() < 1e-12);
        }
        let g = inf_expectation(&m, &ReducedPayoff::constant(2.5), &iv(-1.0, 1.0), 0.0, &PiecewisePath::zero(1))
            .unwrap();
        assert!((g.start_value - 2.5).abs() < 1e-12);
    }

    #[test]
    fn exit_time_value_matches_closed_form() {
        let f = sup_expectation(&exit_model(0.01), &ReducedPayoff::constant(0.0), &iv(-1.0, 1.0), 1.0, &PiecewisePath::zero(1))
            .unwrap();
        let exact = exit_time_closed_form(1.0, 1.0, 0.0).unwrap();
        assert!((f.start_value - exact).abs() < 0.02, "{} vs {exact}", f.start_value);
    }

    #[test]
    fn inf_exit_time_below_sup() {
        let m = exit_model(0.02);
        let sup = sup_expectation(&m, &ReducedPayoff::constant(0.0), &iv(-1.0, 1.0), 1.0, &PiecewisePath::zero(1)).unwrap();
        let inf = inf_expectation(&m, &ReducedPayoff::constant(0.0), &iv(-1.0, 1.0), 1.0, &PiecewisePath::zero(1)).unwrap();
        assert!(inf.start_value < std::f64::consts::E - 2.0);
        for (a, b) in inf.values[0].iter().zip(&sup.values[0]) {
            assert!(a <= &(b + 1e-12));
        }
    }

    #[test]
    fn linear_boundary_payoff_gives_half() {
        let m = LatticeModel::new(&ControlBounds::new(0.0, 1.0, 1.0, 0.0, 0.0).unwrap(), 0.01).unwrap();
        let pay = ReducedPayoff::boundary_values(-1.0, 1.0, 0.0, 1.0);
        let f = sup_expectation(&m, &pay, &iv(-1.0, 1.0), 0.0, &PiecewisePath::zero(1)).unwrap();
        assert!((f.start_value - 0.5).abs() < 1e-10);
    }

    #[test]
    fn local_consistency_of_one_step() {
        let m = LatticeModel::new(&ControlBounds::new(0.7, 0.5, 2.0, 0.0, 0.3).unwrap(), 0.05).unwrap();
        for (hm, hp) in [(0.05, 0.05), (0.05, 0.02), (0.013, 0.05)] {
            for c in &m.controls {
                let (pm, p0, pp, dt) = m.transition(hm, hp, c).unwrap();
                assert!(pm >= 0.0 && p0 >= 0.0 && pp >= 0.0);
                assert!((pm + p0 + pp - 1.0).abs() < 1e-14);
                let mean = pp * hp - pm * hm;
                assert!((mean - c.drift * dt).abs() < 1e-15);
                let var = pp * hp * hp + pm * hm * hm - mean * mean;
                let slack = c.drift.abs() * dt * hm.max(hp) + c.drift * c.drift * dt * dt;
                assert!((var - c.vol_sq * dt).abs() <= slack + 1e-15);
            }
        }
    }

    #[test]
    fn closed_form_examples() {
        assert!(exit_time_closed_form(1.0, 1.0, 1.0).unwrap().abs() < 1e-15);
        assert!((exit_time_closed_form(1.0, 1.0, 0.0).unwrap() - 0.718_281_828_459_045).abs() < 1e-14);
        let e = std::f64::consts::E;
        assert!((exit_time_closed_form(1.0, 1.0, 0.5).unwrap() - (e - 0.5f64.exp() - 0.5)).abs() < 1e-14);
        assert!(exit_time_closed_form(1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn closed_form_solves_the_ode() {
        // −L|u′| − (1/L)u″ − 1 = 0 by central differences at interior points.
        let (l, r) = (1.3, 0.8);
        let u = |x: f64| exit_time_closed_form(l, r, x).unwrap();
        let e = 1e-4;
        for &x in &[-0.6, -0.2, 0.1, 0.5, 0.7] {
            let d1 = (u(x + e) - u(x - e)) / (2.0 * e);
            let d2 = (u(x + e) - 2.0 * u(x) + u(x - e)) / (e * e);
            let res = -l * d1.abs() - d2 / l - 1.0;
            assert!(res.abs() < 1e-5, "residual {res} at {x}");
        }
    }

    #[test]
    fn snell_constant_obstacle() {
        let m = exit_model(0.05);
        let s = snell_sup(&m, &ReducedPayoff::constant(1.5), &iv(-1.0, 1.0), &PiecewisePath::zero(1)).unwrap();
        assert!(s.field.values[0].iter().all(|v| (v - 1.5).abs() < 1e-12));
        assert!(s.stop_region[0].iter().all(|&b| b));
    }

    /// All stopping rules of a non-recombining tree: stop-or-continue per
    /// internal node, with the inner supremum over probabilities by recursion.
    fn brute_force(tree: &StoppingTree, sense: Sense) -> f64 {
        let internal: Vec<(usize, usize)> = (0..tree.depth)
            .flat_map(|k| (0..1usize << k).map(move |i| (k, i)))
            .collect();
        let mut best = match sense {
            Sense::Sup => f64::NEG_INFINITY,
            Sense::Inf => f64::INFINITY,
        };
        for mask in 0u64..(1u64 << internal.len()) {
            let stops = |k: usize, i: usize| -> bool {
                let pos = internal.iter().position(|&n| n == (k, i)).unwrap();
                mask >> pos & 1 == 1
            };
            fn value(t: &StoppingTree, k: usize, i: usize, sense: Sense, stops: &dyn Fn(usize, usize) -> bool) -> f64 {
                if k == t.depth || stops(k, i) {
                    return t.obstacle[k][i];
                }
                let (u, d) = (2 * i + 1, 2 * i);
                let vu = value(t, k + 1, u, sense, stops);
                let vd = value(t, k + 1, d, sense, stops);
                let it = t.probs.iter().map(|p| p * vu + (1.0 - p) * vd);
                match sense {
                    Sense::Sup => it.fold(f64::NEG_INFINITY, f64::max),
                    Sense::Inf => it.fold(f64::INFINITY, f64::min),
                }
            }
            let v = value(tree, 0, 0, sense, &stops);
            best = match sense {
                Sense::Sup => best.max(v),
                Sense::Inf => best.min(v),
            };
        }
        best
    }

    #[test]
    fn toy_tree_matches_enumeration() {
        let t = StoppingTree::from_walk(3, 1.0, vec![0.5], f64::abs);
        let (v, _) = t.snell(Sense::Sup);
        assert!((v - brute_force(&t, Sense::Sup)).abs() < 1e-12);
        // |x| is a submartingale for the fair walk: continuing to the end pays E|S_3| = 1.5.
        assert!((v - 1.5).abs() < 1e-12);
    }

    #[test]
    fn capacity_trivial_events() {
        let m = exit_model(0.05);
        assert_eq!(capacity(&m, &iv(-1.0, 1.0), 0.0, &CapacityEvent::Never).unwrap(), 0.0);
        assert_eq!(capacity(&m, &iv(-1.0, 1.0), 0.0, &CapacityEvent::Always).unwrap(), 1.0);
    }

    #[test]
    fn capacity_of_early_exit_decreases_with_radius() {
        let m = exit_model(0.02);
        let ev = CapacityEvent::ExitBefore { horizon: 0.3 };
        let mut prev = f64::INFINITY;
        for r in [0.4, 0.6, 0.8, 1.0] {
            let c = capacity(&m, &iv(-r, r), 0.0, &ev).unwrap();
            assert!(c < prev && c > 0.0 && c <= 1.0);
            prev = c;
        }
    }

    #[test]
    fn zero_vol_simulation_is_exact() {
        let bounds = ControlBounds::new(1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
        let pol = ControlPoint {
            drift: 0.5,
            vol_sq: 0.0,
            discount: 0.0,
            cost: 1.0,
        };
        let est = mc_lower_bound(&bounds, &pol, &ReducedPayoff::constant(0.0), &iv(-1.0, 1.0), &PiecewisePath::zero(1), &McOptions::new(64, 0.013, 1))
            .unwrap();
        assert!((est.estimate - 2.0).abs() < 1e-12);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn out_of_band_policy_is_rejected() {
        let bounds = ControlBounds::canonical(1.0).unwrap();
        let pol = ControlPoint {
            drift: 3.0,
            vol_sq: 2.0,
            discount: 0.0,
            cost: 0.0,
        };
        let r = mc_lower_bound(&bounds, &pol, &ReducedPayoff::constant(0.0), &iv(-1.0, 1.0), &PiecewisePath::zero(1), &McOptions::new(8, 0.01, 1));
        assert!(matches!(r, Err(LabError::PolicyOutOfBounds(_))));
    }

    #[test]
    fn anchored_grid_contains_anchor_and_ends() {
        let g = anchored_grid(-1.0, 0.7, 0.13, 0.1).unwrap();
        assert_eq!(g[0], -1.0);
        assert_eq!(*g.last().unwrap(), 0.7);
        assert!(g.iter().any(|&x| (x - 0.13).abs() < 1e-15));
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }
}
