//! Open bounded convex domains containing the origin, exit times of
//! piecewise-linear paths and the cascade of successive exits.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::paths::PiecewisePath;

/// Points within this (relative) distance of a constraint count as boundary.
pub const BOUNDARY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConvexDomain {
    Interval {
        lo: f64,
        hi: f64,
    },
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    /// `{x : n_k · x < b_k for all k}`.
    HPolytope {
        normals: Vec<Vec<f64>>,
        offsets: Vec<f64>,
    },
    Intersection {
        parts: Vec<ConvexDomain>,
    },
}

/// First exit of a path from a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub exit_time: Option<f64>,
    pub exit_point: Option<Vec<f64>>,
    pub crossed_face: Option<usize>,
}

impl ExitRecord {
    fn none() -> Self {
        Self {
            exit_time: None,
            exit_point: None,
            crossed_face: None,
        }
    }
}

/// A single scalar constraint `c(x) < 0`.
enum Constraint<'a> {
    Linear { normal: Vec<f64>, offset: f64 },
    Sphere { center: &'a [f64], radius: f64 },
}

impl Constraint<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        match self {
            Constraint::Linear { normal, offset } => dot(normal, x) - offset,
            Constraint::Sphere { center, radius } => {
                crate::paths::dist(x, center) - radius
            }
        }
    }

    fn scale(&self) -> f64 {
        match self {
            Constraint::Linear { normal, offset } => 1.0 + offset.abs() + norm(normal),
            Constraint::Sphere { center, radius } => 1.0 + radius + norm(center),
        }
    }

    /// Smallest `s` in `[0, 1]` with `c(a + s (b - a)) >= 0`.
    fn first_crossing(&self, a: &[f64], b: &[f64]) -> Option<f64> {
        let tol = BOUNDARY_TOL * self.scale();
        if self.value(a) >= -tol {
            return Some(0.0);
        }
        if self.value(b) < -tol {
            // Convex constraint negative at both ends stays negative between.
            return None;
        }
        let d: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
        let s = match self {
            Constraint::Linear { normal, offset } => {
                let va = dot(normal, a) - offset;
                let slope = dot(normal, &d);
                (-va / slope).clamp(0.0, 1.0)
            }
            Constraint::Sphere { center, radius } => {
                let w: Vec<f64> = a.iter().zip(center.iter()).map(|(x, c)| x - c).collect();
                let qa = dot(&d, &d);
                let qb = 2.0 * dot(&w, &d);
                let qc = dot(&w, &w) - radius * radius;
                let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
                // qc < 0, so the larger root is the exit; stable form.
                let sgn = if qb >= 0.0 { 1.0 } else { -1.0 };
                let q = -0.5 * (qb + sgn * disc.sqrt());
                let r1 = q / qa;
                let r2 = qc / q;
                r1.max(r2).clamp(0.0, 1.0)
            }
        };
        Some(refine_root(|t| self.value(&lerp(a, b, t)), s, tol))
    }
}

/// Bisection polish of a crossing estimate on `[0, 1]`.
fn refine_root(f: impl Fn(f64) -> f64, guess: f64, tol: f64) -> f64 {
    if f(guess).abs() <= tol {
        return guess;
    }
    let (mut lo, mut hi) = if f(guess) < 0.0 { (guess, 1.0) } else { (0.0, guess) };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < -tol {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 {
            break;
        }
    }
    hi
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn lerp(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect()
}

impl ConvexDomain {
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        let d = ConvexDomain::Interval { lo, hi };
        d.validate()?;
        Ok(d)
    }

    /// Ball centred at the origin.
    pub fn ball(dim: usize, radius: f64) -> Result<Self> {
        Self::ball_at(vec![0.0; dim], radius)
    }

    pub fn ball_at(center: Vec<f64>, radius: f64) -> Result<Self> {
        let d = ConvexDomain::Ball { center, radius };
        d.validate()?;
        Ok(d)
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexDomain::Interval { .. } => 1,
            ConvexDomain::Ball { center, .. } => center.len(),
            ConvexDomain::Box { lo, .. } => lo.len(),
            ConvexDomain::HPolytope { normals, .. } => normals.first().map_or(0, Vec::len),
            ConvexDomain::Intersection { parts } => parts.first().map_or(0, |p| p.dim()),
        }
    }

    /// Checks the parameters and that the origin is strictly inside.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::InvalidInput(m.to_string()));
        match self {
            ConvexDomain::Interval { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return bad("interval needs finite lo < hi");
                }
            }
            ConvexDomain::Ball { center, radius } => {
                if center.is_empty() || !(radius.is_finite() && *radius > 0.0) {
                    return bad("ball needs a nonempty center and a positive radius");
                }
            }
            ConvexDomain::Box { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| !(a < b))
                {
                    return bad("box needs matching lo < hi per axis");
                }
            }
            ConvexDomain::HPolytope { normals, offsets } => {
                let d = normals.first().map_or(0, Vec::len);
                if d == 0 || normals.len() != offsets.len() || normals.iter().any(|n| n.len() != d)
                {
                    return bad("polytope needs one offset per normal of equal dimension");
                }
                if self.bounding_box().is_none() {
                    return bad("polytope is unbounded");
                }
            }
            ConvexDomain::Intersection { parts } => {
                if parts.is_empty() {
                    return bad("empty intersection");
                }
                let d = parts[0].dim();
                for p in parts {
                    p.validate()?;
                    if p.dim() != d {
                        return Err(LabError::DimensionMismatch {
                            expected: d,
                            found: p.dim(),
                        });
                    }
                }
            }
        }
        if !self.contains(&vec![0.0; self.dim()]) {
            return bad("domain must contain the origin");
        }
        Ok(())
    }

    fn constraints(&self) -> Vec<Constraint<'_>> {
        match self {
            ConvexDomain::Interval { lo, hi } => vec![
                Constraint::Linear { normal: vec![-1.0], offset: -lo },
                Constraint::Linear { normal: vec![1.0], offset: *hi },
            ],
            ConvexDomain::Ball { center, radius } => vec![Constraint::Sphere {
                center,
                radius: *radius,
            }],
            ConvexDomain::Box { lo, hi } => {
                let d = lo.len();
                let mut out = Vec::with_capacity(2 * d);
                for k in 0..d {
                    let mut e = vec![0.0; d];
                    e[k] = -1.0;
                    out.push(Constraint::Linear { normal: e.clone(), offset: -lo[k] });
                    e[k] = 1.0;
                    out.push(Constraint::Linear { normal: e, offset: hi[k] });
                }
                out
            }
            ConvexDomain::HPolytope { normals, offsets } => normals
                .iter()
                .zip(offsets)
                .map(|(n, b)| Constraint::Linear { normal: n.clone(), offset: *b })
                .collect(),
            ConvexDomain::Intersection { parts } => {
                parts.iter().flat_map(|p| p.constraints()).collect()
            }
        }
    }

    /// Strict membership; points within the boundary tolerance are outside.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && self
                .constraints()
                .iter()
                .all(|c| c.value(x) < -BOUNDARY_TOL * c.scale())
    }

    /// `D − x`.
    pub fn shift(&self, x: &[f64]) -> Result<Self> {
        if x.len() != self.dim() {
            return Err(LabError::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        if !self.contains(x) {
            return Err(LabError::OutsideDomain(format!("{x:?}")));
        }
        Ok(self.translated(x))
    }

    fn translated(&self, x: &[f64]) -> Self {
        let sub = |v: &[f64]| -> Vec<f64> { v.iter().zip(x).map(|(a, b)| a - b).collect() };
        match self {
            ConvexDomain::Interval { lo, hi } => ConvexDomain::Interval {
                lo: lo - x[0],
                hi: hi - x[0],
            },
            ConvexDomain::Ball { center, radius } => ConvexDomain::Ball {
                center: sub(center),
                radius: *radius,
            },
            ConvexDomain::Box { lo, hi } => ConvexDomain::Box {
                lo: sub(lo),
                hi: sub(hi),
            },
            ConvexDomain::HPolytope { normals, offsets } => ConvexDomain::HPolytope {
                normals: normals.clone(),
                offsets: normals
                    .iter()
                    .zip(offsets)
                    .map(|(n, b)| b - dot(n, x))
                    .collect(),
            },
            ConvexDomain::Intersection { parts } => ConvexDomain::Intersection {
                parts: parts.iter().map(|p| p.translated(x)).collect(),
            },
        }
    }

    /// Support interval of a one-dimensional domain.
    pub fn as_interval(&self) -> Result<(f64, f64)> {
        if self.dim() != 1 {
            return Err(LabError::DimensionMismatch {
                expected: 1,
                found: self.dim(),
            });
        }
        let (lo, hi) = self
            .bounding_box()
            .ok_or_else(|| LabError::InvalidInput("unbounded domain".into()))?;
        Ok((lo[0], hi[0]))
    }

    /// Axis-aligned bounding box, `None` if unbounded.
    pub fn bounding_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            ConvexDomain::Interval { lo, hi } => Some((vec![*lo], vec![*hi])),
            ConvexDomain::Ball { center, radius } => Some((
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            )),
            ConvexDomain::Box { lo, hi } => Some((lo.clone(), hi.clone())),
            ConvexDomain::HPolytope { normals, offsets } => polytope_box(normals, offsets),
            ConvexDomain::Intersection { parts } => {
                let d = self.dim();
                let mut lo = vec![f64::NEG_INFINITY; d];
                let mut hi = vec![f64::INFINITY; d];
                let mut any = false;
                for p in parts {
                    if let Some((l, h)) = p.bounding_box() {
                        any = true;
                        for k in 0..d {
                            lo[k] = lo[k].max(l[k]);
                            hi[k] = hi[k].min(h[k]);
                        }
                    }
                }
                any.then_some((lo, hi))
            }
        }
    }

    /// First crossing of the segment `a → b` (with `a` inside): the
    /// fraction along the segment and the constraint index.
    pub fn segment_exit(&self, a: &[f64], b: &[f64]) -> Option<(f64, usize)> {
        self.constraints()
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.first_crossing(a, b).map(|s| (s, k)))
            .min_by(|x, y| x.0.total_cmp(&y.0))
    }

    /// First time the path leaves the domain (boundary counts as outside).
    pub fn exit_time(&self, p: &PiecewisePath) -> Result<ExitRecord> {
        if p.dim() != self.dim() {
            return Err(LabError::DimensionMismatch {
                expected: self.dim(),
                found: p.dim(),
            });
        }
        let bps: Vec<(f64, &[f64])> = p.breakpoints().collect();
        if !self.contains(bps[0].1) {
            return Ok(ExitRecord {
                exit_time: Some(0.0),
                exit_point: Some(bps[0].1.to_vec()),
                crossed_face: self.segment_exit(bps[0].1, bps[0].1).map(|c| c.1),
            });
        }
        for w in bps.windows(2) {
            let ((t0, a), (t1, b)) = (w[0], w[1]);
            if let Some((s, face)) = self.segment_exit(a, b) {
                return Ok(ExitRecord {
                    exit_time: Some(t0 + s * (t1 - t0)),
                    exit_point: Some(lerp(a, b, s)),
                    crossed_face: Some(face),
                });
            }
        }
        Ok(ExitRecord::none())
    }
}

fn polytope_box(normals: &[Vec<f64>], offsets: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    // Bound each coordinate by pairs of opposing constraints along that axis,
    // falling back to vertex enumeration in 1 and 2 dimensions.
    let d = normals.first()?.len();
    let mut lo = vec![f64::NEG_INFINITY; d];
    let mut hi = vec![f64::INFINITY; d];
    match d {
        1 => {
            for (n, b) in normals.iter().zip(offsets) {
                if n[0] > 0.0 {
                    hi[0] = hi[0].min(b / n[0]);
                } else if n[0] < 0.0 {
                    lo[0] = lo[0].max(b / n[0]);
                }
            }
        }
        2 => {
            let mut verts = Vec::new();
            for i in 0..normals.len() {
                for j in i + 1..normals.len() {
                    let (a, b) = (&normals[i], &normals[j]);
                    let det = a[0] * b[1] - a[1] * b[0];
                    if det.abs() < 1e-14 {
                        continue;
                    }
                    let x = (offsets[i] * b[1] - a[1] * offsets[j]) / det;
                    let y = (a[0] * offsets[j] - offsets[i] * b[0]) / det;
                    let ok = normals
                        .iter()
                        .zip(offsets)
                        .all(|(n, c)| n[0] * x + n[1] * y <= c + 1e-9 * (1.0 + c.abs()));
                    if ok {
                        verts.push([x, y]);
                    }
                }
            }
            if verts.len() < 3 {
                return None;
            }
            lo = verts.iter().fold(vec![f64::INFINITY; 2], |mut acc, v| {
                acc[0] = acc[0].min(v[0]);
                acc[1] = acc[1].min(v[1]);
                acc
            });
            hi = verts.iter().fold(vec![f64::NEG_INFINITY; 2], |mut acc, v| {
                acc[0] = acc[0].max(v[0]);
                acc[1] = acc[1].max(v[1]);
                acc
            });
        }
        _ => {
            for (n, b) in normals.iter().zip(offsets) {
                let nz: Vec<usize> = (0..d).filter(|&k| n[k] != 0.0).collect();
                if nz.len() == 1 {
                    let k = nz[0];
                    if n[k] > 0.0 {
                        hi[k] = hi[k].min(b / n[k]);
                    } else {
                        lo[k] = lo[k].max(b / n[k]);
                    }
                }
            }
        }
    }
    (lo.iter().chain(&hi).all(|v| v.is_finite())).then_some((lo, hi))
}

/// Successive exit times `h_1 < h_2 < ...` of the increments of `p` from `o`,
/// stopping early once the flat tail is reached.
pub fn cascade_times(o: &ConvexDomain, p: &PiecewisePath, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut t = 0.0;
    for _ in 0..n {
        let inc = p.increments_after(t);
        match o.exit_time(&inc)?.exit_time {
            Some(s) if s > 0.0 => {
                t += s;
                out.push(t);
            }
            _ => break,
        }
    }
    Ok(out)
}

/// `ball(eps) ∩ (Q − ω_{t̄})`, the localized domain of the frozen problem.
pub fn eps_localized(eps: f64, q: &ConvexDomain, history: &PiecewisePath) -> Result<ConvexDomain> {
    if !(eps > 0.0) {
        return Err(LabError::InvalidInput("eps must be positive".into()));
    }
    let x = history.final_value();
    if !q.contains(x) {
        return Err(LabError::BoundaryReached);
    }
    if let Some(t) = q.exit_time(history)?.exit_time {
        if t < history.bar_t() {
            return Err(LabError::Precondition(format!(
                "history leaves the domain at t = {t} before its end"
            )));
        }
    }
    let shifted = q.translated(x);
    let d = q.dim();
    if d == 1 {
        let (lo, hi) = shifted.as_interval()?;
        return Ok(ConvexDomain::Interval {
            lo: lo.max(-eps),
            hi: hi.min(eps),
        });
    }
    let ball = ConvexDomain::Ball {
        center: vec![0.0; d],
        radius: eps,
    };
    let ball_inside = match &shifted {
        ConvexDomain::Ball { center, radius } => norm(center) + eps <= *radius,
        ConvexDomain::Box { lo, hi } => lo.iter().zip(hi).all(|(l, h)| -l >= eps && *h >= eps),
        ConvexDomain::HPolytope { normals, offsets } => normals
            .iter()
            .zip(offsets)
            .all(|(n, b)| eps * norm(n) <= *b),
        _ => false,
    };
    if ball_inside {
        return Ok(ball);
    }
    Ok(ConvexDomain::Intersection {
        parts: vec![ball, shifted],
    })
}
