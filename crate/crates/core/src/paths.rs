//! Continuous paths with flat tails, the pseudo-metric between them and
//! the concatenation used to extend a history.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

const COLLINEAR_TOL: f64 = 1e-12;

/// A finite piecewise-linear path, constant after its last breakpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePath {
    dim: usize,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

/// On-disk form: `{"dim": d, "breakpoints": [[t, [x1..xd]], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathJson {
    pub dim: usize,
    pub breakpoints: Vec<(f64, Vec<f64>)>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn lerp(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect()
}

/// `m` lies on the segment `[a, b]`.
fn between(a: &[f64], m: &[f64], b: &[f64]) -> bool {
    let ab = dist(a, b);
    let scale = 1.0 + norm(a).max(norm(b)).max(norm(m));
    dist(a, m) + dist(m, b) <= ab + COLLINEAR_TOL * scale
}

impl PiecewisePath {
    /// The constant path at the origin.
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            times: vec![0.0],
            values: vec![vec![0.0; dim]],
        }
    }

    /// Linear interpolation of `points`, with the origin prepended at time 0
    /// when the first point is not already `(0, 0)`.
    pub fn lin_interp(dim: usize, points: &[(f64, Vec<f64>)]) -> Result<Self> {
        if dim == 0 {
            return Err(LabError::InvalidInput("dimension must be positive".into()));
        }
        let mut times = vec![0.0];
        let mut values = vec![vec![0.0; dim]];
        for (k, (t, x)) in points.iter().enumerate() {
            if x.len() != dim {
                return Err(LabError::DimensionMismatch {
                    expected: dim,
                    found: x.len(),
                });
            }
            if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(LabError::InvalidInput(format!("non-finite breakpoint {k}")));
            }
            if k == 0 && *t == 0.0 && x.iter().all(|v| *v == 0.0) {
                continue;
            }
            if *t <= *times.last().unwrap() {
                return Err(LabError::InvalidInput(format!(
                    "breakpoint times must be strictly increasing (entry {k} at t = {t})"
                )));
            }
            times.push(*t);
            values.push(x.clone());
        }
        Ok(Self { dim, times, values })
    }

    /// One-dimensional shorthand for [`PiecewisePath::lin_interp`].
    pub fn lin1(points: &[(f64, f64)]) -> Result<Self> {
        let pts: Vec<(f64, Vec<f64>)> = points.iter().map(|&(t, x)| (t, vec![x])).collect();
        Self::lin_interp(1, &pts)
    }

    /// The skeleton through `positions` at integer times `1, 2, ...`.
    pub fn skeleton(dim: usize, positions: &[Vec<f64>]) -> Result<Self> {
        let pts: Vec<(f64, Vec<f64>)> = positions
            .iter()
            .enumerate()
            .map(|(k, x)| ((k + 1) as f64, x.clone()))
            .collect();
        Self::lin_interp(dim, &pts)
    }

    pub fn from_json(json: &PathJson) -> Result<Self> {
        Ok(Self::lin_interp(json.dim, &json.breakpoints)?.canonicalize())
    }

    pub fn to_json(&self) -> PathJson {
        PathJson {
            dim: self.dim,
            breakpoints: self
                .times
                .iter()
                .cloned()
                .zip(self.values.iter().cloned())
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn breakpoints(&self) -> impl Iterator<Item = (f64, &[f64])> + '_ {
        self.times
            .iter()
            .zip(&self.values)
            .map(|(t, v)| (*t, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Time after which the path stays constant.
    pub fn bar_t(&self) -> f64 {
        let last = self.values.last().unwrap();
        let mut k = self.times.len() - 1;
        while k > 0 && self.values[k - 1] == *last {
            k -= 1;
        }
        self.times[k]
    }

    pub fn final_value(&self) -> &[f64] {
        self.values.last().unwrap()
    }

    /// `sup_t |ω_t|`, attained at a breakpoint.
    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(|v| norm(v)).fold(0.0, f64::max)
    }

    /// `sup_t ω_t` of the first coordinate.
    pub fn running_max(&self) -> f64 {
        self.values.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Value at time `t` (constant after the last breakpoint).
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        if t <= 0.0 {
            return self.values[0].clone();
        }
        let k = self.times.partition_point(|&s| s <= t);
        if k >= self.times.len() {
            return self.final_value().to_vec();
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        lerp(&self.values[k - 1], &self.values[k], (t - t0) / (t1 - t0))
    }

    /// The increment path `s ↦ ω_{t+s} − ω_t`.
    pub fn increments_after(&self, t: f64) -> Self {
        let base = self.value_at(t);
        let mut times = vec![0.0];
        let mut values = vec![vec![0.0; self.dim]];
        for (s, v) in self.times.iter().zip(&self.values) {
            if *s > t {
                times.push(s - t);
                values.push(v.iter().zip(&base).map(|(a, b)| a - b).collect());
            }
        }
        Self {
            dim: self.dim,
            times,
            values,
        }
    }

    /// Normal form of the equivalence class: plateaus and interior points
    /// lying between their neighbours are dropped, times renumbered `0..n`.
    pub fn canonicalize(&self) -> Self {
        let mut kept: Vec<Vec<f64>> = Vec::with_capacity(self.values.len());
        for v in &self.values {
            if kept.last().is_some_and(|last| dist(last, v) == 0.0) {
                continue;
            }
            while kept.len() >= 2 && between(&kept[kept.len() - 2], &kept[kept.len() - 1], v) {
                kept.pop();
            }
            if kept.last().is_some_and(|last| dist(last, v) == 0.0) {
                continue;
            }
            kept.push(v.clone());
        }
        let times = (0..kept.len()).map(|k| k as f64).collect();
        Self {
            dim: self.dim,
            times,
            values: kept,
        }
    }

    /// Concatenation at `bar_t` of `self`: the tail is appended as increments
    /// from the final value. The result is canonical.
    pub fn concat(&self, tail: &PiecewisePath) -> Result<Self> {
        check_dims(self, tail)?;
        let t0 = self.bar_t();
        let k_end = self.times.partition_point(|&s| s <= t0);
        let mut times = self.times[..k_end].to_vec();
        let mut values = self.values[..k_end].to_vec();
        let base = self.final_value().to_vec();
        for (s, v) in tail.times.iter().zip(&tail.values).skip(1) {
            times.push(t0 + s);
            values.push(v.iter().zip(&base).map(|(a, b)| a + b).collect());
        }
        Ok(Self {
            dim: self.dim,
            times,
            values,
        }
        .canonicalize())
    }

    /// `self ⊗ Lin{(1, x)}`: the history extended by a straight move of `x`.
    pub fn extend(&self, x: &[f64]) -> Result<Self> {
        self.concat(&Self::lin_interp(self.dim, &[(1.0, x.to_vec())])?)
    }

    fn refined(&self, mesh: f64) -> Vec<Vec<f64>> {
        let mut out = vec![self.values[0].clone()];
        for w in self.values.windows(2) {
            let len = dist(&w[0], &w[1]);
            let pieces = ((len / mesh).ceil() as usize).max(1);
            for j in 1..=pieces {
                out.push(lerp(&w[0], &w[1], j as f64 / pieces as f64));
            }
        }
        out
    }
}

fn check_dims(p: &PiecewisePath, q: &PiecewisePath) -> Result<()> {
    if p.dim != q.dim {
        return Err(LabError::DimensionMismatch {
            expected: p.dim,
            found: q.dim,
        });
    }
    Ok(())
}

/// Discrete Fréchet distance of the canonical forms after refining every
/// edge to length at most `mesh`. Upper bound on `d^e`, off by at most `mesh`.
pub fn de_distance(p: &PiecewisePath, q: &PiecewisePath, mesh: f64) -> Result<f64> {
    check_dims(p, q)?;
    if !(mesh > 0.0) {
        return Err(LabError::InvalidInput("mesh must be positive".into()));
    }
    let a = p.canonicalize().refined(mesh);
    let b = q.canonicalize().refined(mesh);
    Ok(discrete_frechet(&a, &b))
}

/// Rolling-row dynamic program over monotone couplings.
pub(crate) fn discrete_frechet(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut row = vec![0.0_f64; b.len()];
    for (i, ai) in a.iter().enumerate() {
        let mut diag = 0.0_f64;
        for (j, bj) in b.iter().enumerate() {
            let d = dist(ai, bj);
            let up = row[j];
            let best = match (i, j) {
                (0, 0) => d,
                (0, _) => row[j - 1].max(d),
                (_, 0) => up.max(d),
                _ => diag.min(up).min(row[j - 1]).max(d),
            };
            diag = up;
            row[j] = best;
        }
    }
    row[b.len() - 1]
}

/// Least concave nondecreasing majorant of a cloud of (distance, gap) samples,
/// anchored at the origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModulusFit {
    pub samples: Vec<(f64, f64)>,
    /// Vertices of the envelope; linear in between, flat after the last.
    pub hull: Vec<(f64, f64)>,
}

impl ModulusFit {
    pub fn evaluate(&self, d: f64) -> f64 {
        let h = &self.hull;
        if d <= h[0].0 {
            return h[0].1;
        }
        let k = h.partition_point(|p| p.0 <= d);
        if k >= h.len() {
            return h[h.len() - 1].1;
        }
        let (x0, y0) = h[k - 1];
        let (x1, y1) = h[k];
        y0 + (y1 - y0) * (d - x0) / (x1 - x0)
    }

    /// Every sample lies below the envelope (up to `tol`).
    pub fn dominates(&self, samples: &[(f64, f64)], tol: f64) -> bool {
        samples.iter().all(|&(d, g)| g <= self.evaluate(d) + tol)
    }
}

pub fn fit_modulus(samples: &[(f64, f64)]) -> Result<ModulusFit> {
    if samples.is_empty() {
        return Err(LabError::InvalidInput("no samples to fit".into()));
    }
    if samples
        .iter()
        .any(|&(d, g)| !(d >= 0.0) || !(g >= 0.0) || !d.is_finite() || !g.is_finite())
    {
        return Err(LabError::InvalidInput(
            "modulus samples must be finite and nonnegative".into(),
        ));
    }
    let mut pts: Vec<(f64, f64)> = samples.to_vec();
    pts.push((0.0, 0.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|a, b| a.0 == b.0);

    // Upper hull by monotone chain.
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for p in pts {
        while hull.len() >= 2 {
            let (o, a) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (a.0 - o.0) * (p.1 - o.1) - (a.1 - o.1) * (p.0 - o.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    // Nondecreasing: cut after the maximum.
    let imax = hull
        .iter()
        .enumerate()
        .fold(0, |best, (i, p)| if p.1 > hull[best].1 { i } else { best });
    hull.truncate(imax + 1);
    Ok(ModulusFit {
        samples: samples.to_vec(),
        hull,
    })
}
