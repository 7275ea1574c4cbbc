//! One function per experiment kind: resolve the config, run the solvers and
//! return the artifacts in memory. Nothing touches the disk here.

use ppde_lab::generators::vol_band;
use ppde_lab::lattice::{
    exit_time_closed_form, hitting_time_gap, mc_lower_bound, sup_expectation, ControlBounds, ControlPoint,
    FieldPolicy, LatticeModel, McEstimate, McOptions, ReducedPayoff,
};
use ppde_lab::perron::{modulus_probe, sweep, PerronProblem, PerronResult};
use ppde_lab::uvm::{extract_worst_case, mc_superhedge_lb, price_direct, UvmSpec};
use ppde_lab::viscosity_audit::{audit_point, candidate_grid, difference_jet, AuditSetup, PathFunctional};
use ppde_lab::{check_assumptions, de_distance, fit_modulus, ConvexDomain, LabError, PiecewisePath};
use serde_json::json;

use crate::config::{
    AssumptionsParams, ExitTimeParams, FrechetParams, GeneratorConfig, Loaded, ModulusProbeParams, PerronSweepParams,
    PriceUvmParams, ProbeMode, ViscosityAuditParams,
};
use crate::manifest::KeyOutput;
use crate::CliError;

/// Artifacts and key outputs of a finished run.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    /// `(file name, contents)`.
    pub artifacts: Vec<(String, String)>,
    pub key_outputs: Vec<KeyOutput>,
    pub seed: Option<u64>,
    pub h: Option<f64>,
}

impl Outcome {
    fn json(&mut self, name: &str, v: serde_json::Value) {
        let text = serde_json::to_string_pretty(&v).expect("JSON values serialize") + "\n";
        self.artifacts.push((name.to_string(), text));
    }

    fn csv(&mut self, name: &str, text: String) {
        self.artifacts.push((name.to_string(), text));
    }
}

/// Solver errors: numerical failures keep their own exit code, everything
/// else means the config asked for something invalid.
fn lab(e: LabError) -> CliError {
    if e.is_numerical() {
        CliError::Numerical {
            source: e,
            diagnostics: None,
        }
    } else {
        CliError::Invalid(e)
    }
}

fn require(ok: bool, msg: impl FnOnce() -> String) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg()))
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    require(v > 0.0 && v.is_finite(), || format!("`{name}` must be positive, got {v}"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mc_json(e: &McEstimate) -> serde_json::Value {
    json!({"estimate": e.estimate, "std_error": e.std_error, "n_paths": e.n_paths, "seed": e.seed})
}

pub fn exit_time(cfg: &Loaded<ExitTimeParams>, seed: Option<u64>) -> Result<Outcome, CliError> {
    let p = &cfg.file.params;
    positive("radius", p.radius)?;
    positive("h", p.h)?;
    require(p.lip >= 1.0 && p.lip.is_finite(), || {
        format!("`lip` must be at least 1 for the closed form, got {}", p.lip)
    })?;
    require(p.profile_points >= 2, || "`profile_points` must be at least 2".into())?;
    let seed = match &p.mc {
        Some(mc) => {
            require(mc.n_paths >= 2, || "`mc.n_paths` must be at least 2".into())?;
            positive("mc.dt", mc.dt)?;
            Some(cfg.seed(seed)?)
        }
        None => seed.or(cfg.file.seed),
    };

    let r = p.radius;
    let q = ConvexDomain::interval(-r, r).map_err(lab)?;
    let bounds = ControlBounds::canonical(p.lip).map_err(lab)?.undiscounted();
    let model = LatticeModel::new(&bounds, p.h).map_err(lab)?;
    let zero_payoff = ReducedPayoff::constant(0.0);
    let field = sup_expectation(&model, &zero_payoff, &q, 1.0, &PiecewisePath::zero(1)).map_err(lab)?;
    let policy = FieldPolicy {
        field: &field,
        fallback: ControlPoint {
            drift: 0.0,
            vol_sq: vol_band(p.lip).0,
            discount: 0.0,
            cost: 1.0,
        },
    };
    let simulate = |x: f64, s: u64| -> Result<McEstimate, CliError> {
        let mc = p.mc.as_ref().expect("called only with MC settings");
        let hist = PiecewisePath::lin1(&[(1.0, x)]).map_err(lab)?;
        mc_lower_bound(&bounds, &policy, &zero_payoff, &q, &hist, &McOptions::new(mc.n_paths, mc.dt, s)).map_err(lab)
    };

    let n = p.profile_points;
    let mut csv = String::from("x,closed_form,dp,mc,mc_se,dp_gap,mc_gap\n");
    let mut max_gap = 0.0f64;
    for k in 0..n {
        let x = -r + 2.0 * r * k as f64 / (n - 1) as f64;
        let cf = exit_time_closed_form(p.lip, r, x.clamp(-r, r)).map_err(lab)?;
        let dp = field.value_at(&[x], 0.0);
        max_gap = max_gap.max((dp - cf).abs());
        let interior = k > 0 && k + 1 < n;
        let mc = match seed {
            Some(s) if p.mc.is_some() && interior => Some(simulate(x, s.wrapping_add(1 + k as u64))?),
            _ => None,
        };
        csv.push_str(&format!(
            "{x},{cf},{dp},{},{},{},{}\n",
            opt(mc.map(|m| m.estimate)),
            opt(mc.map(|m| m.std_error)),
            dp - cf,
            opt(mc.map(|m| m.estimate - cf)),
        ));
    }

    let cf0 = exit_time_closed_form(p.lip, r, 0.0).map_err(lab)?;
    let mut out = Outcome {
        seed,
        h: Some(p.h),
        ..Default::default()
    };
    out.key_outputs.push(KeyOutput::dp("dp_at_0", field.start_value, p.dp_tolerance));
    out.key_outputs.push(KeyOutput::dp("closed_form_at_0", cf0, 0.0));
    out.key_outputs.push(KeyOutput::dp("oracle_gap_at_0", field.start_value - cf0, p.dp_tolerance));
    out.key_outputs.push(KeyOutput::dp("oracle_gap_max", max_gap, p.dp_tolerance));
    let mut summary = json!({
        "lip": p.lip, "radius": r, "h": p.h,
        "dp_at_0": field.start_value, "closed_form_at_0": cf0,
        "oracle_gap_at_0": field.start_value - cf0, "oracle_gap_max": max_gap,
        "iterations": field.iterations, "residual": field.residual,
    });
    if let (Some(s), Some(_)) = (seed, &p.mc) {
        let m0 = simulate(0.0, s)?;
        out.key_outputs.push(KeyOutput::mc("mc_at_0", m0.estimate, m0.std_error));
        summary["mc_at_0"] = mc_json(&m0);
    }
    out.csv("exit_time.csv", csv);
    out.json("summary.json", summary);
    Ok(out)
}

pub fn frechet(cfg: &Loaded<FrechetParams>, seed: Option<u64>) -> Result<Outcome, CliError> {
    let p = &cfg.file.params;
    positive("mesh", p.mesh)?;
    let a = cfg.path(&p.a)?;
    let b = cfg.path(&p.b)?;
    let d = de_distance(&a, &b, p.mesh).map_err(lab)?;
    let mut out = Outcome {
        seed: seed.or(cfg.file.seed),
        h: Some(p.mesh),
        ..Default::default()
    };
    out.key_outputs.push(KeyOutput::dp("distance", d, p.mesh));
    out.json(
        "distance.json",
        json!({
            "a": p.a, "b": p.b, "mesh": p.mesh, "distance": d,
            "a_canonical": a.canonicalize().to_json(), "b_canonical": b.canonicalize().to_json(),
        }),
    );
    Ok(out)
}

fn uvm_spec(cfg_gen: &GeneratorConfig, domain: ConvexDomain, payoff: ReducedPayoff) -> Result<UvmSpec, CliError> {
    let GeneratorConfig::Uvm {
        rate,
        drift_bound,
        sigma_lo,
        sigma_hi,
        ..
    } = *cfg_gen
    else {
        return Err(CliError::Config("this experiment needs a `uvm` generator".into()));
    };
    require(rate > 0.0, || format!("`rate` must be positive, got {rate}"))?;
    UvmSpec::new(rate, sigma_lo, sigma_hi, drift_bound, domain, payoff).map_err(CliError::Invalid)
}

fn perron_outputs(out: &mut Outcome, res: &PerronResult, tol: f64) {
    for d in &res.depths {
        out.key_outputs.push(KeyOutput::dp(format!("upper_m{}", d.m), d.upper, tol));
        out.key_outputs.push(KeyOutput::dp(format!("lower_m{}", d.m), d.lower, tol));
        out.key_outputs.push(KeyOutput::dp(format!("gap_m{}", d.m), d.gap, tol));
    }
    out.key_outputs.push(KeyOutput::dp("bracket_lower", res.bracket.0, tol));
    out.key_outputs.push(KeyOutput::dp("bracket_upper", res.bracket.1, tol));
    let mut csv = String::from("m,upper,lower,gap,root_field_gap,capacity,leaf_gap,nodes\n");
    for d in &res.depths {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            d.m,
            d.upper,
            d.lower,
            d.gap,
            d.root_field_gap,
            d.capacity,
            d.leaf_gap,
            d.nodes.len()
        ));
    }
    out.csv("perron_depths.csv", csv);
    out.csv("perron_nodes.csv", res.nodes_csv());
}

pub fn price_uvm(cfg: &Loaded<PriceUvmParams>, seed: Option<u64>) -> Result<Outcome, CliError> {
    let p = &cfg.file.params;
    positive("h", p.h)?;
    require(p.mc.n_paths >= 2, || "`mc.n_paths` must be at least 2".into())?;
    positive("mc.dt", p.mc.dt)?;
    let domain = cfg.domain(&p.domain)?;
    let payoff = cfg.payoff(&p.payoff)?;
    let spec = uvm_spec(cfg.generator_config(&p.generator)?, domain.clone(), payoff.clone())?;
    let generator = cfg.generator(&p.generator)?;
    let history = cfg.history(p.history.as_deref(), 1)?;
    if let Some(eps) = p.eps {
        positive("eps", eps)?;
        require(!p.m_list.is_empty(), || "`m_list` must be nonempty when `eps` is set".into())?;
    }
    let seed = cfg.seed(seed)?;

    let field = price_direct(&spec, &history, p.h).map_err(lab)?;
    let perron = match p.eps {
        Some(eps) => {
            let mut pp = PerronProblem::new(history.clone(), domain, generator, payoff, eps, p.h);
            pp.closure = p.closure.into();
            pp.richardson = p.richardson;
            Some(sweep(&pp, &p.m_list).map_err(lab)?)
        }
        None => None,
    };
    let opts = |s: u64| McOptions::new(p.mc.n_paths, p.mc.dt, s);
    let hi_ctl = spec.constant_policy(spec.sigma_hi * spec.sigma_hi);
    let lo_ctl = spec.constant_policy(spec.sigma_lo * spec.sigma_lo);
    let mc_hi = mc_superhedge_lb(&spec, &history, &hi_ctl, &opts(seed)).map_err(lab)?;
    let mc_lo = mc_superhedge_lb(&spec, &history, &lo_ctl, &opts(seed.wrapping_add(1))).map_err(lab)?;
    let worst_policy = FieldPolicy {
        field: &field,
        fallback: hi_ctl,
    };
    let mc_worst = mc_superhedge_lb(&spec, &history, &worst_policy, &opts(seed.wrapping_add(2))).map_err(lab)?;
    let worst = extract_worst_case(&spec, &field, p.h, p.mc.n_paths, seed.wrapping_add(3), &p.checkpoints).map_err(lab)?;

    let mut out = Outcome {
        seed: Some(seed),
        h: Some(p.h),
        ..Default::default()
    };
    out.key_outputs.push(KeyOutput::dp("price", field.start_value, p.dp_tolerance));
    out.key_outputs.push(KeyOutput::mc("mc_sigma_hi", mc_hi.estimate, mc_hi.std_error));
    out.key_outputs.push(KeyOutput::mc("mc_sigma_lo", mc_lo.estimate, mc_lo.std_error));
    out.key_outputs.push(KeyOutput::mc("mc_worst_case", mc_worst.estimate, mc_worst.std_error));
    out.json(
        "price.json",
        json!({
            "price": field.start_value,
            "iterations": field.iterations,
            "residual": field.residual,
            "bracket": perron.as_ref().map(|r| [r.bracket.0, r.bracket.1]),
            "perron": perron.as_ref().map(PerronResult::to_json),
            "mc": {
                "sigma_hi": mc_json(&mc_hi),
                "sigma_lo": mc_json(&mc_lo),
                "worst_case": mc_json(&mc_worst),
            },
            "martingale": {"checks": worst.checks, "max_z": worst.max_z()},
        }),
    );
    out.csv("value_field.csv", field.to_csv());
    out.csv("policy.csv", worst.policy_csv());
    if let Some(r) = &perron {
        perron_outputs(&mut out, r, p.dp_tolerance);
    }
    Ok(out)
}

pub fn perron_sweep(cfg: &Loaded<PerronSweepParams>, seed: Option<u64>) -> Result<Outcome, CliError> {
    let p = &cfg.file.params;
    positive("eps", p.eps)?;
    positive("h", p.h)?;
    require(!p.m_list.is_empty(), || "`m_list` must be nonempty".into())?;
    let domain = cfg.domain(&p.domain)?;
    let generator = cfg.generator(&p.generator)?;
    let payoff = cfg.payoff(&p.payoff)?;
    let history = cfg.history(p.history.as_deref(), domain.dim())?;
    let mut pp = PerronProblem::new(history, domain, generator, payoff, p.eps, p.h);
    pp.closure = p.closure.into();
    pp.richardson = p.richardson;
    let res = sweep(&pp, &p.m_list).map_err(lab)?;
    let mut out = Outcome {
        seed: seed.or(cfg.file.seed),
        h: Some(p.h),
        ..Default::default()
    };
    out.json("perron.json", res.to_json());
    perron_outputs(&mut out, &res, p.dp_tolerance);
    Ok(out)
}

pub fn modulus_probe_run(cfg: &Loaded<ModulusProbeParams>, seed: Option<u64>) -> Result<Outcome, CliError> {
    let p = &cfg.file.params;
    positive("h", p.h)?;
    let domain = cfg.domain(&p.domain)?;
    // (label a, label b, distance, gap)
    let mut samples: Vec<(String, String, f64, f64)> = Vec::new();
    match p.mode {
        ProbeMode::Hitting => {
            let lip = p.lip.ok_or_else(|| CliError::Config("hitting mode needs `lip`".into()))?;
            let x = p.x.ok_or_else(|| CliError::Config("hitting mode needs `x`".into()))?;
            require(!p.deltas.is_empty(), || "hitting mode needs nonempty `deltas`".into())?;
            let bounds = ControlBounds::canonical(lip).map_err(CliError::Invalid)?.undiscounted();
            let model = LatticeModel::new(&bounds, p.h).map_err(lab)?;
            for &d in &p.deltas {
                let gap = hitting_time_gap(&model, &domain, x, x + d).map_err(lab)?;
                samples.push((x.to_string(), (x + d).to_string(), d.abs(), gap));
            }
        }
        ProbeMode::Perron => {
            let need = |what: &str| CliError::Config(format!("perron mode needs `{what}`"));
            let generator = cfg.generator(p.generator.as_deref().ok_or_else(|| need("generator"))?)?;
            let payoff = cfg.payoff(p.payoff.as_deref().ok_or_else(|| need("payoff"))?)?;
            let eps = p.eps.ok_or_else(|| need("eps"))?;
            positive("eps", eps)?;
            let m = p.m.ok_or_else(|| need("m"))?;
            positive("mesh", p.mesh)?;
            require(!p.pairs.is_empty(), || "perron mode needs nonempty `pairs`".into())?;
            let pairs = p
                .pairs
                .iter()
                .map(|(a, b)| Ok((a, b, cfg.path(a)?, cfg.path(b)?)))
                .collect::<Result<Vec<_>, CliError>>()?;
            let mut pp = PerronProblem::new(pairs[0].2.clone(), domain, generator, payoff, eps, p.h);
            pp.closure = p.closure.into();
            for (a, b, pa, pb) in &pairs {
                let (gap, d) = modulus_probe(&pp, pa, pb, m, p.mesh).map_err(lab)?;
                samples.push(((*a).clone(), (*b).clone(), d, gap));
            }
        }
    }
    let cloud: Vec<(f64, f64)> = samples.iter().map(|s| (s.2, s.3)).collect();
    let fit = fit_modulus(&cloud).map_err(lab)?;
    let mut csv = String::from("a,b,distance,gap,fit\n");
    for (a, b, d, g) in &samples {
        csv.push_str(&format!("{},{},{d},{g},{}\n", csv_field(a), csv_field(b), fit.evaluate(*d)));
    }
    let mut out = Outcome {
        seed: seed.or(cfg.file.seed),
        h: Some(p.h),
        ..Default::default()
    };
    for (k, (_, _, _, g)) in samples.iter().enumerate() {
        out.key_outputs.push(KeyOutput::dp(format!("gap_{k}"), *g, p.dp_tolerance));
    }
    out.csv("samples.csv", csv);
    out.json(
        "fit.json",
        json!({"hull": fit.hull, "dominates_samples": fit.dominates(&cloud, 1e-12), "samples": cloud}),
    );
    Ok(out)
}

pub fn viscosity_audit(cfg: &Loaded<ViscosityAuditParams>, seed: Option<u64>) -> Result<Outcome, CliError> {
    let p = &cfg.file.params;
    positive("h", p.h)?;
    positive("audit_h", p.audit_h)?;
    positive("eps", p.eps)?;
    positive("level", p.level)?;
    require(p.grid_n >= 1, || "`grid_n` must be at least 1".into())?;
    require(!p.histories.is_empty(), || "`histories` must be nonempty".into())?;
    let domain = cfg.domain(&p.domain)?;
    let payoff = cfg.payoff(&p.payoff)?;
    let spec = uvm_spec(cfg.generator_config(&p.generator)?, domain.clone(), payoff)?;
    let g = cfg.generator(&p.generator)?;
    let histories = p
        .histories
        .iter()
        .map(|n| Ok((n, cfg.path(n)?)))
        .collect::<Result<Vec<_>, CliError>>()?;

    let field = price_direct(&spec, &PiecewisePath::zero(1), p.h).map_err(lab)?;
    let setup = AuditSetup {
        q: domain,
        eps: p.eps,
        h: p.audit_h,
        membership_tol: p.membership_tol,
        generator_tol: p.generator_tol.unwrap_or(10.0 * p.audit_h),
    };
    let u = |w: &PiecewisePath| -> ppde_lab::Result<f64> {
        Ok(field.value_at(w.final_value(), spec.payoff.state_init(w)))
    };
    let mut csv = String::from("history,alpha,beta,level,sub_member,super_member,sub_envelope,super_envelope,minus_g\n");
    let mut reports = Vec::new();
    let (mut violations, mut members) = (0usize, 0usize);
    for (name, hist) in &histories {
        let base = hist.final_value()[0];
        let bumped = |w: &PiecewisePath| -> ppde_lab::Result<f64> {
            let x = w.final_value()[0];
            Ok(u(w)? + if (x - base).abs() < 1e-12 { p.bump } else { 0.0 })
        };
        let audited: &PathFunctional = &bumped;
        let u_ref: &PathFunctional = &u;
        let jet = difference_jet(u_ref, hist, p.audit_h).map_err(lab)?;
        let cands = candidate_grid(jet, p.half_width, p.grid_n, p.level);
        let rep = audit_point(audited, hist, &g, &setup, &cands).map_err(lab)?;
        violations += rep.violations.len();
        members += rep.entries.iter().filter(|e| e.sub_member || e.super_member).count();
        for e in &rep.entries {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                csv_field(name),
                e.candidate.alpha,
                e.candidate.beta,
                e.candidate.level,
                e.sub_member,
                e.super_member,
                e.sub_envelope,
                e.super_envelope,
                e.minus_g
            ));
        }
        reports.push(json!({"history": name, "difference_jet": [jet.0, jet.1], "report": rep}));
    }
    let mut out = Outcome {
        seed: seed.or(cfg.file.seed),
        h: Some(p.audit_h),
        ..Default::default()
    };
    out.key_outputs.push(KeyOutput::dp("violations", violations as f64, 0.0));
    out.key_outputs.push(KeyOutput::dp("members", members as f64, 0.0));
    out.json(
        "audit.json",
        json!({
            "pricing_h": p.h, "audit_h": p.audit_h, "eps": p.eps, "bump": p.bump,
            "membership_tol": setup.membership_tol, "generator_tol": setup.generator_tol,
            "violations": violations, "members": members, "histories": reports,
        }),
    );
    out.csv("audit.csv", csv);
    Ok(out)
}

pub fn assumptions_check(cfg: &Loaded<AssumptionsParams>, seed: Option<u64>) -> Result<Outcome, CliError> {
    let p = &cfg.file.params;
    require(p.samples >= 1, || "`samples` must be at least 1".into())?;
    require(!p.generators.is_empty(), || "`generators` must be nonempty".into())?;
    let gens = p
        .generators
        .iter()
        .map(|n| Ok((n, cfg.generator(n)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let seed = cfg.seed(seed)?;
    let mut out = Outcome {
        seed: Some(seed),
        ..Default::default()
    };
    let mut csv = String::from("generator,check,sample,detail\n");
    let mut reports = Vec::new();
    for (name, g) in &gens {
        let rep = check_assumptions(g, p.samples, seed);
        for v in &rep.violations {
            csv.push_str(&format!("{},{},{},{}\n", csv_field(name), v.check, v.sample, csv_field(&v.detail)));
        }
        out.key_outputs.push(KeyOutput::mc(format!("violations_{name}"), rep.violations.len() as f64, 0.0));
        reports.push(json!({"name": name, "passed": rep.passed(), "report": rep}));
    }
    out.json("assumptions.json", json!({"seed": seed, "samples": p.samples, "generators": reports}));
    out.csv("violations.csv", csv);
    Ok(out)
}
