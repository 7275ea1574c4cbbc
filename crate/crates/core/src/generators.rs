//! The nonlinearity `G(ω, y, z, γ)`, the bounding generators and sampled
//! checks of the structural assumptions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::paths::{de_distance, PiecewisePath};

/// Symmetric `d × d` Hessian argument.
pub type Sym = DMatrix<f64>;

type PathFn = Arc<dyn Fn(&PiecewisePath) -> f64 + Send + Sync>;
type GeneralFn = Arc<dyn Fn(&PiecewisePath, f64, &[f64], &Sym) -> f64 + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Sup,
    Inf,
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(LabError::InvalidInput(format!("bad band [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn covers(&self, other: &Band) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    /// Endpoints (one value when degenerate).
    pub fn endpoints(&self) -> Vec<f64> {
        if self.lo == self.hi {
            vec![self.lo]
        } else {
            vec![self.lo, self.hi]
        }
    }
}

/// Source term of an HJB generator: a constant or a functional of the frozen path.
#[derive(Clone)]
pub enum Source {
    Constant(f64),
    Path { bound: f64, f: PathFn },
}

impl Source {
    pub fn value(&self, omega: &PiecewisePath) -> f64 {
        match self {
            Source::Constant(c) => *c,
            Source::Path { f, .. } => f(omega),
        }
    }

    pub fn bound(&self) -> f64 {
        match self {
            Source::Constant(c) => c.abs(),
            Source::Path { bound, .. } => *bound,
        }
    }
}

impl fmt::Debug for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Constant(c) => write!(f, "Constant({c})"),
            Source::Path { bound, .. } => write!(f, "Path(|f| <= {bound})"),
        }
    }
}

/// `G = opt_{α, β², b} [−b y + α·z + ½ β²:γ] + f(ω)` over a box of controls.
///
/// In one dimension the drift ranges over the band; in higher dimensions the
/// band must be symmetric and is read as the Euclidean ball of radius `hi`.
#[derive(Debug, Clone)]
pub struct HjbForm {
    pub sense: Sense,
    pub drift: Band,
    pub vol_sq: Band,
    pub discount: Band,
    pub source: Source,
}

impl HjbForm {
    fn opt(&self, a: f64, b: f64) -> f64 {
        match self.sense {
            Sense::Sup => a.max(b),
            Sense::Inf => a.min(b),
        }
    }

    pub fn evaluate(&self, omega: &PiecewisePath, y: f64, z: &[f64], gamma: &Sym) -> f64 {
        let disc = self.opt(-self.discount.lo * y, -self.discount.hi * y);
        let drift = if z.len() == 1 {
            self.opt(self.drift.lo * z[0], self.drift.hi * z[0])
        } else {
            let r = self.drift.hi * z.iter().map(|v| v * v).sum::<f64>().sqrt();
            match self.sense {
                Sense::Sup => r,
                Sense::Inf => -r,
            }
        };
        disc + drift + self.vol_term(gamma) + self.source.value(omega)
    }

    /// `opt over β² in band of ½ β²:γ`, attained eigenvalue by eigenvalue.
    pub fn vol_term(&self, gamma: &Sym) -> f64 {
        let eig: Vec<f64> = if gamma.nrows() == 1 {
            vec![gamma[(0, 0)]]
        } else if is_diagonal(gamma) {
            gamma.diagonal().iter().cloned().collect()
        } else {
            SymmetricEigen::new(gamma.clone()).eigenvalues.iter().cloned().collect()
        };
        eig.iter()
            .map(|&l| 0.5 * self.opt(self.vol_sq.lo * l, self.vol_sq.hi * l))
            .sum()
    }

    /// Same control box, opposite optimization.
    pub fn mirrored(&self) -> Self {
        Self {
            sense: match self.sense {
                Sense::Sup => Sense::Inf,
                Sense::Inf => Sense::Sup,
            },
            ..self.clone()
        }
    }
}

fn is_diagonal(m: &Sym) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

#[derive(Clone)]
pub enum GeneratorKind {
    Hjb(HjbForm),
    General(GeneralFn),
}

impl fmt::Debug for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorKind::Hjb(h) => write!(f, "Hjb({h:?})"),
            GeneratorKind::General(_) => write!(f, "General(..)"),
        }
    }
}

/// Which bounding pair the Perron recursion closes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosureMode {
    /// `ḡ` and `g̲` built from `(L_0, C_0)`.
    #[default]
    Canonical,
    /// Sup and inf over the generator's own control box; needs an HJB form.
    Tight,
}

/// A generator with its structural constants.
#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub name: String,
    pub dim: usize,
    pub kind: GeneratorKind,
    /// `L_0`.
    pub lip: f64,
    /// `C_0`.
    pub bound: f64,
    /// `λ(y) = rate · y`.
    pub monotonicity_rate: f64,
    /// `ρ(d) = omega_lipschitz · d`.
    pub omega_lipschitz: f64,
}

/// `C_0 + L_0|z| + L_0 y⁻ + sup_{β² ∈ [2/L_0, 2L_0]} ½β²:γ`.
pub fn g_upper(y: f64, z: &[f64], gamma: &Sym, lip: f64, bound: f64) -> f64 {
    canonical_form(Sense::Sup, lip, bound).evaluate(&PiecewisePath::zero(z.len()), y, z, gamma)
}

/// `−C_0 − L_0|z| − L_0 y⁺ + inf_{β² ∈ [2/L_0, 2L_0]} ½β²:γ`.
pub fn g_lower(y: f64, z: &[f64], gamma: &Sym, lip: f64, bound: f64) -> f64 {
    canonical_form(Sense::Inf, lip, bound).evaluate(&PiecewisePath::zero(z.len()), y, z, gamma)
}

/// `[2/L, 2L]`, read as `[2L, 2/L]` when `L < 1`.
pub fn vol_band(lip: f64) -> (f64, f64) {
    let (a, b) = (2.0 / lip, 2.0 * lip);
    (a.min(b), a.max(b))
}

pub(crate) fn canonical_form(sense: Sense, lip: f64, bound: f64) -> HjbForm {
    let c = match sense {
        Sense::Sup => bound,
        Sense::Inf => -bound,
    };
    HjbForm {
        sense,
        drift: Band { lo: -lip, hi: lip },
        vol_sq: Band {
            lo: vol_band(lip).0,
            hi: vol_band(lip).1,
        },
        discount: Band { lo: 0.0, hi: lip },
        source: Source::Constant(c),
    }
}

fn check_constants(lip: f64, bound: f64) -> Result<()> {
    if !(lip > 0.0 && lip.is_finite()) {
        return Err(LabError::InvalidInput("L_0 must be positive".into()));
    }
    if !(bound >= 0.0 && bound.is_finite()) {
        return Err(LabError::InvalidInput("C_0 must be nonnegative".into()));
    }
    Ok(())
}

impl GeneratorSpec {
    pub fn g_upper(dim: usize, lip: f64, bound: f64) -> Result<Self> {
        check_constants(lip, bound)?;
        Ok(Self {
            name: "g_upper".into(),
            dim,
            kind: GeneratorKind::Hjb(canonical_form(Sense::Sup, lip, bound)),
            lip,
            bound,
            monotonicity_rate: 0.0,
            omega_lipschitz: 0.0,
        })
    }

    pub fn g_lower(dim: usize, lip: f64, bound: f64) -> Result<Self> {
        check_constants(lip, bound)?;
        Ok(Self {
            name: "g_lower".into(),
            dim,
            kind: GeneratorKind::Hjb(canonical_form(Sense::Inf, lip, bound)),
            lip,
            bound,
            monotonicity_rate: 0.0,
            omega_lipschitz: 0.0,
        })
    }

    /// `G = −r y + a|z| + sup_{β² ∈ [σ̲², σ̄²]} ½β²:γ` with
    /// `L_0 = max(2/σ̲², σ̄²/2, a, r)`.
    pub fn uvm(rate: f64, drift_bound: f64, sigma_lo: f64, sigma_hi: f64) -> Result<Self> {
        if !(sigma_lo > 0.0) {
            return Err(LabError::InvalidInput("sigma_lo must be positive".into()));
        }
        if !(sigma_hi >= sigma_lo && sigma_hi.is_finite()) {
            return Err(LabError::InvalidInput("need sigma_lo <= sigma_hi".into()));
        }
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(LabError::InvalidInput("rate must be positive".into()));
        }
        if !(drift_bound >= 0.0 && drift_bound.is_finite()) {
            return Err(LabError::InvalidInput("drift bound must be nonnegative".into()));
        }
        let (s2lo, s2hi) = (sigma_lo * sigma_lo, sigma_hi * sigma_hi);
        let lip = (2.0 / s2lo).max(s2hi / 2.0).max(drift_bound).max(rate);
        Ok(Self {
            name: "uvm".into(),
            dim: 1,
            kind: GeneratorKind::Hjb(HjbForm {
                sense: Sense::Sup,
                drift: Band {
                    lo: -drift_bound,
                    hi: drift_bound,
                },
                vol_sq: Band { lo: s2lo, hi: s2hi },
                discount: Band::point(rate),
                source: Source::Constant(0.0),
            }),
            lip,
            bound: 1e-6,
            monotonicity_rate: rate,
            omega_lipschitz: 0.0,
        })
    }

    /// `G = −r y + μ z + ½σ² γ + f` in one dimension.
    pub fn linear(rate: f64, drift: f64, vol_sq: f64, source: f64) -> Result<Self> {
        if !(vol_sq > 0.0) || rate < 0.0 {
            return Err(LabError::InvalidInput(
                "linear generator needs vol_sq > 0 and rate >= 0".into(),
            ));
        }
        let lip = (2.0 / vol_sq).max(vol_sq / 2.0).max(drift.abs()).max(rate);
        Ok(Self {
            name: "linear".into(),
            dim: 1,
            kind: GeneratorKind::Hjb(HjbForm {
                sense: Sense::Sup,
                drift: Band::point(drift),
                vol_sq: Band::point(vol_sq),
                discount: Band::point(rate),
                source: Source::Constant(source),
            }),
            lip,
            bound: source.abs().max(1e-12),
            monotonicity_rate: rate,
            omega_lipschitz: 0.0,
        })
    }

    /// Wraps an arbitrary closure; the caller declares the constants.
    pub fn general(
        name: &str,
        dim: usize,
        lip: f64,
        bound: f64,
        monotonicity_rate: f64,
        f: impl Fn(&PiecewisePath, f64, &[f64], &Sym) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        check_constants(lip, bound)?;
        Ok(Self {
            name: name.into(),
            dim,
            kind: GeneratorKind::General(Arc::new(f)),
            lip,
            bound,
            monotonicity_rate,
            omega_lipschitz: 0.0,
        })
    }

    pub fn with_bound(mut self, bound: f64) -> Result<Self> {
        check_constants(self.lip, bound)?;
        self.bound = bound;
        Ok(self)
    }

    pub fn with_lip(mut self, lip: f64) -> Result<Self> {
        check_constants(lip, self.bound)?;
        self.lip = lip;
        Ok(self)
    }

    /// Replaces the source of an HJB form by a functional of the frozen path.
    pub fn with_path_source(
        mut self,
        bound: f64,
        omega_lipschitz: f64,
        f: impl Fn(&PiecewisePath) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        match &mut self.kind {
            GeneratorKind::Hjb(h) => {
                h.source = Source::Path {
                    bound,
                    f: Arc::new(f),
                }
            }
            GeneratorKind::General(_) => {
                return Err(LabError::Unsupported("path source on a general generator".into()))
            }
        }
        self.omega_lipschitz = omega_lipschitz;
        if self.bound < bound {
            self.bound = bound;
        }
        Ok(self)
    }

    pub fn evaluate(&self, omega: &PiecewisePath, y: f64, z: &[f64], gamma: &Sym) -> f64 {
        match &self.kind {
            GeneratorKind::Hjb(h) => h.evaluate(omega, y, z, gamma),
            GeneratorKind::General(f) => f(omega, y, z, gamma),
        }
    }

    pub fn evaluate_1d(&self, omega: &PiecewisePath, y: f64, z: f64, gamma: f64) -> f64 {
        self.evaluate(omega, y, &[z], &Sym::from_element(1, 1, gamma))
    }

    pub fn hjb(&self) -> Option<&HjbForm> {
        match &self.kind {
            GeneratorKind::Hjb(h) => Some(h),
            GeneratorKind::General(_) => None,
        }
    }

    /// `λ^{-1}(c)`; infinite when the generator is not strictly decreasing in `y`.
    pub fn lambda_inverse(&self, c: f64) -> f64 {
        if self.monotonicity_rate > 0.0 {
            c / self.monotonicity_rate
        } else {
            f64::INFINITY
        }
    }

    /// Upper and lower closing generators for the Perron recursion.
    pub fn closures(&self, mode: ClosureMode) -> Result<(HjbForm, HjbForm)> {
        match mode {
            ClosureMode::Canonical => Ok((
                canonical_form(Sense::Sup, self.lip, self.bound),
                canonical_form(Sense::Inf, self.lip, self.bound),
            )),
            ClosureMode::Tight => {
                let h = self.hjb().ok_or_else(|| {
                    LabError::Unsupported("tight closures need an HJB-form generator".into())
                })?;
                let src_hi = match &h.source {
                    Source::Constant(c) => *c,
                    Source::Path { bound, .. } => *bound,
                };
                let src_lo = match &h.source {
                    Source::Constant(c) => *c,
                    Source::Path { bound, .. } => -*bound,
                };
                let upper = HjbForm {
                    sense: Sense::Sup,
                    source: Source::Constant(src_hi),
                    ..h.clone()
                };
                let lower = HjbForm {
                    sense: Sense::Inf,
                    source: Source::Constant(src_lo),
                    ..h.clone()
                };
                Ok((upper, lower))
            }
        }
    }
}

/// Outcome of the sampled assumption checks.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub generator: String,
    pub samples: usize,
    pub seed: u64,
    pub violations: Vec<Violation>,
    /// Largest observed `|ΔG| / (|Δy| + |Δz| + ‖Δγ‖_*)`.
    pub max_lipschitz_ratio: f64,
    /// Smallest observed `(G(γ1) − G(γ2)) / tr(γ1 − γ2)` for `γ1 ≥ γ2`.
    pub min_ellipticity_ratio: f64,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, check: &str) -> usize {
        self.violations.iter().filter(|v| v.check == check).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub check: String,
    pub sample: usize,
    pub detail: String,
}

fn random_path(rng: &mut ChaCha8Rng, dim: usize) -> PiecewisePath {
    let n = rng.gen_range(0..4);
    let pts: Vec<(f64, Vec<f64>)> = (1..=n)
        .map(|k| (k as f64, (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    PiecewisePath::lin_interp(dim, &pts).expect("valid random path")
}

fn random_sym(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Sym {
    let a = Sym::from_fn(dim, dim, |_, _| rng.gen_range(-scale..scale));
    (&a + a.transpose()) * 0.5
}

fn random_psd(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Sym {
    let a = Sym::from_fn(dim, dim, |_, _| rng.gen_range(-scale..scale));
    &a * a.transpose()
}

fn nuclear_norm(m: &Sym) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)].abs();
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .map(|v| v.abs())
        .sum()
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Sampled verification of ellipticity, Lipschitz continuity, monotonicity in
/// `y`, the bound at the origin, dominance by the bounding pair and
/// continuity in the path argument. Violations are collected, not thrown.
pub fn check_assumptions(g: &GeneratorSpec, sample_count: usize, seed: u64) -> AssumptionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = g.dim;
    let l0 = g.lip;
    let mut rep = AssumptionReport {
        generator: g.name.clone(),
        samples: sample_count,
        seed,
        min_ellipticity_ratio: f64::INFINITY,
        ..Default::default()
    };
    let rel = |a: f64, b: f64| 1e-9 * (1.0 + a.abs() + b.abs());
    let push = |rep: &mut AssumptionReport, check: &str, i: usize, detail: String| {
        rep.violations.push(Violation {
            check: check.into(),
            sample: i,
            detail,
        })
    };
    for i in 0..sample_count {
        let w = random_path(&mut rng, d);
        let y = rng.gen_range(-3.0..3.0);
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let gam = random_sym(&mut rng, d, 3.0);
        let base = g.evaluate(&w, y, &z, &gam);

        // Ellipticity.
        let dgam = random_psd(&mut rng, d, 1.5);
        let up = g.evaluate(&w, y, &z, &(&gam + &dgam));
        let tr = dgam.trace();
        if tr > 1e-12 {
            rep.min_ellipticity_ratio = rep.min_ellipticity_ratio.min((up - base) / tr);
        }
        if up - base < tr / l0 - rel(up, base) {
            push(&mut rep, "ellipticity", i, format!("ΔG = {:e} < tr/L0 = {:e}", up - base, tr / l0));
        }

        // Lipschitz.
        let y2 = y + rng.gen_range(-1.0..1.0);
        let z2: Vec<f64> = z.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
        let gam2 = &gam + random_sym(&mut rng, d, 1.0);
        let other = g.evaluate(&w, y2, &z2, &gam2);
        let dz: Vec<f64> = z.iter().zip(&z2).map(|(a, b)| a - b).collect();
        let dist = (y - y2).abs() + vec_norm(&dz) + nuclear_norm(&(&gam - &gam2));
        if dist > 1e-12 {
            rep.max_lipschitz_ratio = rep.max_lipschitz_ratio.max((base - other).abs() / dist);
        }
        if (base - other).abs() > l0 * dist + rel(base, other) {
            push(&mut rep, "lipschitz", i, format!("|ΔG| = {:e} > L0·dist = {:e}", (base - other).abs(), l0 * dist));
        }

        // Monotonicity: G(y_lo) − G(y_hi) ≥ λ(y_hi − y_lo).
        let dy = rng.gen_range(0.01..2.0);
        let hi = g.evaluate(&w, y + dy, &z, &gam);
        let lam = g.monotonicity_rate * dy;
        if base - hi < lam - rel(base, hi) {
            push(&mut rep, "monotonicity", i, format!("G(y) − G(y+{dy:.3}) = {:e} < λ = {lam:e}", base - hi));
        }

        // Bound at the origin.
        let g0 = g.evaluate(&w, 0.0, &vec![0.0; d], &Sym::zeros(d, d));
        if g0.abs() > g.bound + rel(g0, g.bound) {
            push(&mut rep, "bound", i, format!("|G(ω,0,0,0)| = {:e} > C0 = {:e}", g0.abs(), g.bound));
        }

        // Dominance by the bounding pair.
        let gu = g_upper(y, &z, &gam, l0, g.bound);
        let gl = g_lower(y, &z, &gam, l0, g.bound);
        if base > gu + rel(base, gu) || base < gl - rel(base, gl) {
            push(&mut rep, "dominance", i, format!("G = {base:e} outside [{gl:e}, {gu:e}]"));
        }

        // Continuity in the path argument.
        let w2 = random_path(&mut rng, d);
        let dw = de_distance(&w, &w2, 0.05).unwrap_or(f64::INFINITY);
        let other_w = g.evaluate(&w2, y, &z, &gam);
        if (base - other_w).abs() > g.omega_lipschitz * dw + rel(base, other_w) {
            push(&mut rep, "path_continuity", i, format!("|ΔG| = {:e} at d^e = {dw:e}", (base - other_w).abs()));
        }
    }
    if rep.min_ellipticity_ratio == f64::INFINITY {
        rep.min_ellipticity_ratio = 0.0;
    }
    rep
}
