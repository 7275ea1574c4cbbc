//! Superhedging under uncertain volatility with exit-time maturity: direct
//! lattice price, Perron bracket, Monte Carlo lower bounds and the
//! worst-case policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domains::ConvexDomain;
use crate::error::{LabError, Result};
use crate::generators::{ClosureMode, GeneratorSpec};
use crate::lattice::{
    mc_lower_bound, mean_se, sup_expectation, Action, ControlBounds, ControlPoint, ControlPolicy, Geometry,
    LatticeField, LatticeModel, McEstimate, McOptions, ReducedPayoff,
};
use crate::paths::PiecewisePath;
use crate::perron::{sweep, PerronProblem, PerronResult};

/// Model and payoff of the pricing problem.
#[derive(Debug, Clone)]
pub struct UvmSpec {
    pub rate: f64,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    pub drift_bound: f64,
    pub domain: ConvexDomain,
    pub payoff: ReducedPayoff,
}

impl UvmSpec {
    pub fn new(
        rate: f64,
        sigma_lo: f64,
        sigma_hi: f64,
        drift_bound: f64,
        domain: ConvexDomain,
        payoff: ReducedPayoff,
    ) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(LabError::InvalidInput(format!("rate must be positive, got {rate}")));
        }
        if !(sigma_lo > 0.0 && sigma_lo <= sigma_hi && sigma_hi.is_finite()) {
            return Err(LabError::InvalidInput(format!(
                "need 0 < sigma_lo <= sigma_hi, got [{sigma_lo}, {sigma_hi}]"
            )));
        }
        if !(drift_bound >= 0.0 && drift_bound.is_finite()) {
            return Err(LabError::InvalidInput("drift bound must be nonnegative".into()));
        }
        if domain.dim() != 1 {
            return Err(LabError::Unsupported("pricing is one-dimensional".into()));
        }
        domain.as_interval()?;
        Ok(Self {
            rate,
            sigma_lo,
            sigma_hi,
            drift_bound,
            domain,
            payoff,
        })
    }

    pub fn generator(&self) -> Result<GeneratorSpec> {
        GeneratorSpec::uvm(self.rate, self.drift_bound, self.sigma_lo, self.sigma_hi)
    }

    pub fn bounds(&self) -> ControlBounds {
        ControlBounds {
            drift_bound: self.drift_bound,
            vol_sq_lo: self.sigma_lo * self.sigma_lo,
            vol_sq_hi: self.sigma_hi * self.sigma_hi,
            discount_lo: self.rate,
            discount_hi: self.rate,
        }
    }

    /// Lattice with `σ̄²` listed first, so that exact ties resolve toward `σ̄`.
    pub fn model(&self, h: f64) -> Result<LatticeModel> {
        LatticeModel::new(&self.bounds(), h)
    }

    /// Constant admissible control with volatility `vol_sq` and no drift.
    pub fn constant_policy(&self, vol_sq: f64) -> ControlPoint {
        ControlPoint {
            drift: 0.0,
            vol_sq,
            discount: self.rate,
            cost: 0.0,
        }
    }
}

/// Lattice price field; the price is `start_value`.
pub fn price_direct(spec: &UvmSpec, history: &PiecewisePath, h: f64) -> Result<LatticeField> {
    sup_expectation(&spec.model(h)?, &spec.payoff, &spec.domain, 0.0, history)
}

/// Perron bracket of the price.
pub fn price_perron(
    spec: &UvmSpec,
    history: &PiecewisePath,
    eps: f64,
    m_list: &[usize],
    h: f64,
    closure: ClosureMode,
    richardson: bool,
) -> Result<PerronResult> {
    let mut p = PerronProblem::new(
        history.clone(),
        spec.domain.clone(),
        spec.generator()?,
        spec.payoff.clone(),
        eps,
        h,
    );
    p.closure = closure;
    p.richardson = richardson;
    sweep(&p, m_list)
}

/// Simulated `E^P[e^{−r h_Q} ξ]` under one admissible policy.
pub fn mc_superhedge_lb(
    spec: &UvmSpec,
    history: &PiecewisePath,
    policy: &dyn ControlPolicy,
    opts: &McOptions,
) -> Result<McEstimate> {
    mc_lower_bound(&spec.bounds(), policy, &spec.payoff, &spec.domain, history, opts)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyRow {
    pub x: f64,
    pub aux: f64,
    pub drift: f64,
    pub vol_sq: f64,
}

/// Mean increment of `e^{−rt} u` between consecutive checkpoints.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MartingaleCheck {
    pub t: f64,
    pub mean_increment: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorstCase {
    pub policy: Vec<PolicyRow>,
    pub checks: Vec<MartingaleCheck>,
}

impl WorstCase {
    /// Largest `|mean| / SE` over checkpoints (0 when every increment vanishes).
    pub fn max_z(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| {
                if c.std_error > 0.0 {
                    c.mean_increment.abs() / c.std_error
                } else if c.mean_increment.abs() <= 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn policy_csv(&self) -> String {
        let mut out = String::from("x,aux,drift,vol_sq\n");
        for r in &self.policy {
            out.push_str(&format!("{},{},{},{}\n", r.x, r.aux, r.drift, r.vol_sq));
        }
        out
    }
}

/// Argmax controls of a price field and the martingale check of
/// `e^{−rt} u(state)` along the controlled chain, sampled at `checkpoints`.
pub fn extract_worst_case(
    spec: &UvmSpec,
    field: &LatticeField,
    h: f64,
    n_paths: usize,
    seed: u64,
    checkpoints: &[f64],
) -> Result<WorstCase> {
    let Geometry::Line(x) = &field.geometry else {
        return Err(LabError::Unsupported("worst-case extraction is one-dimensional".into()));
    };
    let model = spec.model(h)?;
    let n = x.len();
    let mut policy = Vec::new();
    for (li, acts) in field.actions.iter().enumerate() {
        for i in 1..n - 1 {
            if let Action::Control(c) = acts[i] {
                let c = field.controls[c];
                policy.push(PolicyRow {
                    x: x[i],
                    aux: field.levels[li],
                    drift: c.drift,
                    vol_sq: c.vol_sq,
                });
            }
        }
    }
    if n_paths == 0 || checkpoints.is_empty() {
        return Ok(WorstCase { policy, checks: vec![] });
    }
    let start = field.start.first().copied().unwrap_or(0.0);
    let i0 = x
        .iter()
        .position(|&v| (v - start).abs() <= 1e-12)
        .ok_or_else(|| LabError::InvalidInput("start is not a grid node".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut incs = vec![Vec::with_capacity(n_paths); checkpoints.len()];
    for _ in 0..n_paths {
        let (mut i, mut aux, mut t, mut disc) = (i0, field.start_aux, 0.0, 1.0_f64);
        let value = |i: usize, aux: f64| field.values[field.level_of(aux)][i];
        let mut prev = value(i, aux);
        for (k, &tk) in checkpoints.iter().enumerate() {
            while t < tk && i != 0 && i != n - 1 {
                let act = field.actions[field.level_of(aux)][i];
                let Action::Control(ci) = act else { break };
                let c = field.controls[ci];
                let (pm, _, pp, dt) = model.transition(x[i] - x[i - 1], x[i + 1] - x[i], &c)?;
                let u: f64 = rng.gen();
                if u < pm {
                    i -= 1;
                } else if u < pm + pp {
                    i += 1;
                }
                t += dt;
                disc *= (-c.discount * dt).exp();
                if i != 0 && i != n - 1 {
                    aux = spec.payoff.state_update(aux, &[x[i]]);
                }
            }
            let cur = disc * value(i, aux);
            incs[k].push(cur - prev);
            prev = cur;
        }
    }
    let checks = checkpoints
        .iter()
        .zip(&incs)
        .map(|(&t, v)| {
            let (m, se) = mean_se(v);
            MartingaleCheck {
                t,
                mean_increment: m,
                std_error: se,
            }
        })
        .collect();
    Ok(WorstCase { policy, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q() -> ConvexDomain {
        ConvexDomain::interval(-1.0, 1.0).unwrap()
    }

    #[test]
    fn harmonic_interpolation() {
        let s = UvmSpec::new(1e-9, 1.0, 1.0, 0.0, q(), ReducedPayoff::boundary_values(-1.0, 1.0, 0.0, 1.0)).unwrap();
        let f = price_direct(&s, &PiecewisePath::zero(1), 0.01).unwrap();
        assert!((f.start_value - 0.5).abs() < 1e-6);
    }

    #[test]
    fn collapsed_band_cosh() {
        let r2 = 2f64.sqrt();
        let s = UvmSpec::new(1.0, r2, r2, 0.0, q(), ReducedPayoff::constant(1.0)).unwrap();
        let f = price_direct(&s, &PiecewisePath::zero(1), 0.01).unwrap();
        assert!((f.start_value - 1.0 / 1f64.cosh()).abs() < 1e-2);
    }

    #[test]
    fn convex_payoff_uses_high_vol() {
        let pay = ReducedPayoff::markovian("square", |x| x[0] * x[0] + 0.5 * x[0]);
        let s = UvmSpec::new(0.5, 0.8, 1.5, 0.0, q(), pay.clone()).unwrap();
        let hi = UvmSpec::new(0.5, 1.5, 1.5, 0.0, q(), pay).unwrap();
        let f = price_direct(&s, &PiecewisePath::zero(1), 0.02).unwrap();
        let g = price_direct(&hi, &PiecewisePath::zero(1), 0.02).unwrap();
        assert!((f.start_value - g.start_value).abs() < 1e-9);
        let w = extract_worst_case(&s, &f, 0.02, 0, 1, &[]).unwrap();
        assert!(w.policy.iter().all(|r| (r.vol_sq - 2.25).abs() < 1e-12));
    }

    #[test]
    fn concave_payoff_uses_low_vol() {
        let s = UvmSpec::new(0.5, 0.8, 1.5, 0.0, q(), ReducedPayoff::constant(-1.0)).unwrap();
        let f = price_direct(&s, &PiecewisePath::zero(1), 0.02).unwrap();
        let w = extract_worst_case(&s, &f, 0.02, 0, 1, &[]).unwrap();
        assert!(w.policy.iter().all(|r| (r.vol_sq - 0.64).abs() < 1e-12));
    }

    #[test]
    fn degenerate_band_martingale_residual() {
        let s = UvmSpec::new(0.5, 1.0, 1.0, 0.0, q(), ReducedPayoff::boundary_values(-1.0, 1.0, 0.2, 1.0)).unwrap();
        let f = price_direct(&s, &PiecewisePath::zero(1), 0.05).unwrap();
        let w = extract_worst_case(&s, &f, 0.05, 4000, 3, &[0.1, 0.3, 0.6, 1.0]).unwrap();
        assert!(w.max_z() < 3.0, "{:?}", w.checks);
    }

    #[test]
    fn rejects_nonpositive_rate() {
        assert!(UvmSpec::new(0.0, 1.0, 1.0, 0.0, q(), ReducedPayoff::constant(1.0)).is_err());
    }
}
