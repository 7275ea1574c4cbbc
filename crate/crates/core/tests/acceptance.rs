//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Tolerances are pinned as constants next to each check.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ppde_lab::frozen_pde::{comparison_gap, solve_dirichlet, FrozenProblem};
use ppde_lab::lattice::{
    exit_time_closed_form, hitting_time_gap, mc_lower_bound, sup_expectation, ControlBounds, ControlPoint,
    FieldPolicy, LatticeModel, McOptions, ReducedPayoff, StoppingTree,
};
use ppde_lab::perron::{modulus_probe, sweep, PerronProblem, PerronResult};
use ppde_lab::uvm::{price_direct, price_perron, UvmSpec};
use ppde_lab::viscosity_audit::{audit_point, candidate_grid, difference_jet, AuditSetup, PathFunctional};
use ppde_lab::{de_distance, fit_modulus, ClosureMode, ConvexDomain, GeneratorSpec, PiecewisePath, Sense};

type Outcome = Result<String, String>;

fn q11() -> ConvexDomain {
    ConvexDomain::interval(-1.0, 1.0).unwrap()
}

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

// ---------------------------------------------------------------------------

fn exit_time_oracle() -> Outcome {
    const H: f64 = 1.0 / 400.0;
    const TOL_POINT: f64 = 2e-3;
    const TOL_PROFILE: f64 = 5e-3;
    const N_PATHS: usize = 100_000;
    const MC_DT: f64 = 1e-3;
    const BUDGET_S: f64 = 30.0;

    let t0 = Instant::now();
    let bounds = ControlBounds::new(1.0, 2.0, 2.0, 0.0, 0.0).map_err(err)?;
    let model = LatticeModel::new(&bounds, H).map_err(err)?;
    let field = sup_expectation(&model, &ReducedPayoff::constant(0.0), &q11(), 1.0, &PiecewisePath::zero(1))
        .map_err(err)?;
    let exact = std::f64::consts::E - 2.0;
    let e0 = (field.start_value - exact).abs();
    let mut profile = 0.0f64;
    for k in 0..=20 {
        let x = -1.0 + 0.1 * k as f64;
        let cf = exit_time_closed_form(1.0, 1.0, x).map_err(err)?;
        profile = profile.max((field.value_at(&[x], 0.0) - cf).abs());
    }
    let fallback = ControlPoint {
        drift: 0.0,
        vol_sq: 2.0,
        discount: 0.0,
        cost: 1.0,
    };
    let policy = FieldPolicy {
        field: &field,
        fallback,
    };
    let mc = mc_lower_bound(
        &bounds,
        &policy,
        &ReducedPayoff::constant(0.0),
        &q11(),
        &PiecewisePath::zero(1),
        &McOptions::new(N_PATHS, MC_DT, 20_240_601),
    )
    .map_err(err)?;
    let z = (mc.estimate - field.start_value).abs() / mc.std_error;
    let secs = t0.elapsed().as_secs_f64();
    check(
        e0 <= TOL_POINT && profile <= TOL_PROFILE && z <= 3.0 && secs < BUDGET_S,
        format!(
            "DP(0)={:.7} exact={exact:.7} err={e0:.2e} profile={profile:.2e} MC={:.5}+-{:.5} z={z:.2} {secs:.1}s",
            field.start_value, mc.estimate, mc.std_error
        ),
    )
}

fn uvm_collapsed_band() -> Outcome {
    const H: f64 = 1.0 / 400.0;
    const TOL_DIRECT: f64 = 2e-3;
    const MAX_WIDTH: f64 = 5e-3;
    const BUDGET_S: f64 = 60.0;

    let t0 = Instant::now();
    let s2 = 2f64.sqrt();
    let spec = UvmSpec::new(1.0, s2, s2, 0.0, q11(), ReducedPayoff::constant(1.0)).map_err(err)?;
    let exact = 1.0 / 1f64.cosh();
    let direct = price_direct(&spec, &PiecewisePath::zero(1), H).map_err(err)?.start_value;
    let res = price_perron(&spec, &PiecewisePath::zero(1), 0.1, &[6], H, ClosureMode::Tight, true).map_err(err)?;
    let (lo, hi) = res.bracket;
    let secs = t0.elapsed().as_secs_f64();
    check(
        (direct - exact).abs() <= TOL_DIRECT && lo <= exact && exact <= hi && hi - lo <= MAX_WIDTH && secs < BUDGET_S,
        format!("direct={direct:.7} exact={exact:.7} bracket=[{lo:.7}, {hi:.7}] width={:.2e} {secs:.1}s", hi - lo),
    )
}

fn harmonic_sanity() -> Outcome {
    const TOL: f64 = 1e-3;
    let spec = UvmSpec::new(1e-9, 1.0, 1.0, 0.0, q11(), ReducedPayoff::boundary_values(-1.0, 1.0, 0.0, 1.0))
        .map_err(err)?;
    let v = price_direct(&spec, &PiecewisePath::zero(1), 1.0 / 400.0).map_err(err)?.start_value;
    check((v - 0.5).abs() <= TOL, format!("price(0)={v:.9}"))
}

/// The stress instance shared by the squeeze and boundedness checks.
fn stress_problem() -> PerronProblem {
    let s_lo = 1.5f64.sqrt();
    let s_hi = 2.5f64.sqrt();
    let g = GeneratorSpec::uvm(0.5, 0.5, s_lo, s_hi).unwrap().with_bound(0.5).unwrap();
    let pay = ReducedPayoff::markovian("tilted", |x| x[0] * x[0] + 0.5 * x[0]);
    PerronProblem::new(PiecewisePath::zero(1), q11(), g, pay, 0.5, 0.01)
}

fn squeeze_monotonicity(stress: &PerronResult) -> Outcome {
    // Twice the policy-iteration tolerance 1e-10 (1 + max|v|), with |v| ≤ 4.
    const MONO_TOL: f64 = 2e-9 * 5.0;
    const GAP_SLACK: f64 = 5e-3;

    let d = &stress.depths;
    let mut worst = 0.0f64;
    for w in d.windows(2) {
        for n1 in &w[1].nodes {
            let Some(n0) = w[0].nodes.iter().find(|n| n.skeleton == n1.skeleton) else {
                continue;
            };
            worst = worst.max(n1.upper - n0.upper).max(n0.lower - n1.lower);
            for k in 0..n1.nodes.len() {
                worst = worst
                    .max(n1.upper_field[k] - n0.upper_field[k])
                    .max(n0.lower_field[k] - n1.lower_field[k]);
            }
        }
    }
    let gaps = stress.gaps();
    let strictly = gaps.windows(2).all(|w| w[1] < w[0]);
    let c = d.iter().map(|r| r.leaf_gap).fold(0.0, f64::max);
    let bound_ok = d.iter().all(|r| r.gap <= c * r.capacity + GAP_SLACK);
    let caps: Vec<String> = d.iter().map(|r| format!("{:.3e}", r.capacity)).collect();
    let gs: Vec<String> = gaps.iter().map(|g| format!("{g:.3e}")).collect();
    check(
        worst <= MONO_TOL && strictly && bound_ok,
        format!("monotonicity excess={worst:.1e} gaps=[{}] C={c:.3} capacities=[{}]", gs.join(", "), caps.join(", ")),
    )
}

fn ball_comparison() -> Outcome {
    const TOL: f64 = 5e-3;
    const PAIRS: usize = 50;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..PAIRS {
        let radius = rng.gen_range(0.3..1.0);
        let center = rng.gen_range(-0.8..0.8) * radius;
        let ball = ConvexDomain::ball_at(vec![center], radius).map_err(err)?;
        let g = match k % 3 {
            0 => {
                let lo = rng.gen_range(0.6..1.2);
                GeneratorSpec::uvm(rng.gen_range(0.1..1.0), rng.gen_range(0.0..1.0), lo, lo + rng.gen_range(0.0..0.8))
            }
            1 => GeneratorSpec::g_upper(1, rng.gen_range(0.8..1.5), rng.gen_range(0.0..0.5)),
            _ => GeneratorSpec::g_lower(1, rng.gen_range(0.8..1.5), rng.gen_range(0.0..0.5)),
        }
        .map_err(err)?;
        let bounds = ControlBounds::canonical(g.lip).map_err(err)?;
        let h = 0.01;
        let step = LatticeModel::new(&bounds, h).map_err(err)?.step;
        let mut data = [0.0; 4];
        for v in &mut data {
            *v = rng.gen_range(-1.0..1.0);
        }
        let solve = |a: f64, b: f64| {
            let mut p = FrozenProblem::new(PiecewisePath::zero(1), ball.clone(), g.clone(), a, b, h);
            p.step = Some(step);
            solve_dirichlet(&p)
        };
        let v1 = solve(data[0], data[1]).map_err(err)?;
        let v2 = solve(data[2], data[3]).map_err(err)?;
        let rep = comparison_gap(&v1, &v2, &bounds, 0.0, Some(step)).map_err(err)?;
        worst = worst.max(rep.max_violation);
    }
    check(worst <= TOL, format!("{PAIRS} pairs, worst excess over the lattice bound {worst:.2e}"))
}

/// Every stopping rule of a binary tree: stop here, or continue and pick a
/// rule in each subtree. Returns the value of each rule under the nested
/// optimization over the controller's probabilities.
fn rule_values(t: &StoppingTree, k: usize, i: usize, sense: Sense) -> Vec<f64> {
    let stop = t.obstacle[k][i];
    if k == t.depth {
        return vec![stop];
    }
    let ups = rule_values(t, k + 1, 2 * i + 1, sense);
    let downs = rule_values(t, k + 1, 2 * i, sense);
    let mut out = vec![stop];
    for &vu in &ups {
        for &vd in &downs {
            let it = t.probs.iter().map(|p| p * vu + (1.0 - p) * vd);
            out.push(match sense {
                Sense::Sup => it.fold(f64::NEG_INFINITY, f64::max),
                Sense::Inf => it.fold(f64::INFINITY, f64::min),
            });
        }
    }
    out
}

fn snell_brute_force() -> Outcome {
    const TOL: f64 = 1e-12;
    const INSTANCES: usize = 20;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst, mut identical, mut rules) = (0.0f64, 0usize, 0usize);
    for k in 0..INSTANCES {
        let depth = 1 + k % 4;
        let n_probs = 1 + rng.gen_range(0..3);
        let probs: Vec<f64> = (0..n_probs).map(|_| rng.gen_range(0.05..0.95)).collect();
        let obstacle: Vec<Vec<f64>> = (0..=depth)
            .map(|lvl| (0..1usize << lvl).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let tree = StoppingTree {
            depth,
            probs,
            obstacle,
        };
        for sense in [Sense::Sup, Sense::Inf] {
            let all = rule_values(&tree, 0, 0, sense);
            rules += all.len();
            let best = match sense {
                Sense::Sup => all.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Sense::Inf => all.iter().copied().fold(f64::INFINITY, f64::min),
            };
            let (dp, _) = tree.snell(sense);
            if dp.to_bits() == best.to_bits() {
                identical += 1;
            }
            worst = worst.max((dp - best).abs());
        }
    }
    check(
        worst <= TOL,
        format!("{INSTANCES} trees x 2 senses, {rules} rules, {identical}/40 bit-identical, max diff {worst:.1e}"),
    )
}

fn random_path(rng: &mut ChaCha8Rng) -> PiecewisePath {
    let n = rng.gen_range(1..5);
    let mut t = 0.0;
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            t += rng.gen_range(0.2..2.0);
            (t, rng.gen_range(-1.0..1.0))
        })
        .collect();
    PiecewisePath::lin1(&pts).unwrap()
}

fn de_properties() -> Outcome {
    const MESH: f64 = 1e-3;
    const MATCHED_TOL: f64 = 1e-9;
    const REFINE_TOL: f64 = MESH;

    let a = PiecewisePath::lin1(&[(0.5, 0.7), (7.0, -0.3)]).map_err(err)?;
    let b = PiecewisePath::lin1(&[(1.0, 0.7), (2.0, -0.3)]).map_err(err)?;
    let d_pair = de_distance(&a, &b, MESH).map_err(err)?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let zero = PiecewisePath::zero(1);
    let mut norm_err = 0.0f64;
    for _ in 0..20 {
        let p = random_path(&mut rng);
        norm_err = norm_err.max((de_distance(&p, &zero, MESH).map_err(err)? - p.max_norm()).abs());
    }
    let (mut symmetric, mut tri) = (true, f64::NEG_INFINITY);
    for _ in 0..100 {
        let (p, q, r) = (random_path(&mut rng), random_path(&mut rng), random_path(&mut rng));
        let pq = de_distance(&p, &q, MESH).map_err(err)?;
        let qp = de_distance(&q, &p, MESH).map_err(err)?;
        let qr = de_distance(&q, &r, MESH).map_err(err)?;
        let pr = de_distance(&p, &r, MESH).map_err(err)?;
        symmetric &= pq.to_bits() == qp.to_bits();
        tri = tri.max(pr - pq - qr);
    }
    check(
        d_pair <= MATCHED_TOL && norm_err <= REFINE_TOL && symmetric && tri <= REFINE_TOL,
        format!("pair={d_pair:.1e} norm err={norm_err:.1e} symmetric={symmetric} triangle excess={tri:.1e}"),
    )
}

fn viscosity_audit() -> Outcome {
    const H: f64 = 1.0 / 400.0;
    const AUDIT_H: f64 = 0.01;
    const GEN_TOL: f64 = 10.0 * AUDIT_H;
    const MEMBER_TOL: f64 = 1e-10;

    let s2 = 2f64.sqrt();
    let spec = UvmSpec::new(1.0, s2, s2, 0.0, q11(), ReducedPayoff::constant(1.0)).map_err(err)?;
    let g = spec.generator().map_err(err)?;
    let field = price_direct(&spec, &PiecewisePath::zero(1), H).map_err(err)?;
    let u = |p: &PiecewisePath| -> ppde_lab::Result<f64> { Ok(field.value_at(p.final_value(), 0.0)) };
    let setup = AuditSetup {
        q: q11(),
        eps: 0.2,
        h: AUDIT_H,
        membership_tol: MEMBER_TOL,
        generator_tol: GEN_TOL,
    };
    let histories = [
        PiecewisePath::lin1(&[(1.0, 0.0)]).map_err(err)?,
        PiecewisePath::lin1(&[(1.0, 0.3)]).map_err(err)?,
        PiecewisePath::lin1(&[(1.0, -0.6), (2.0, -0.4)]).map_err(err)?,
        PiecewisePath::lin1(&[(1.0, 0.5), (3.0, 0.2)]).map_err(err)?,
        PiecewisePath::lin1(&[(0.5, -0.2), (1.0, 0.4), (2.0, 0.5)]).map_err(err)?,
    ];
    let (mut violations, mut members) = (0usize, 0usize);
    for hist in &histories {
        let jet = difference_jet(&u, hist, AUDIT_H).map_err(err)?;
        let cands = candidate_grid(jet, (0.5, 1.0), 11, 1.0);
        let rep = audit_point(&u, hist, &g, &setup, &cands).map_err(err)?;
        violations += rep.violations.len();
        members += rep.entries.iter().filter(|e| e.sub_member || e.super_member).count();
    }
    let hist = &histories[1];
    let base = hist.final_value()[0];
    let bumped = |p: &PiecewisePath| -> ppde_lab::Result<f64> {
        let x = p.final_value()[0];
        Ok(field.value_at(&[x], 0.0) + if (x - base).abs() < 1e-12 { 0.5 } else { 0.0 })
    };
    let bumped_ref: &PathFunctional = &bumped;
    let u_ref: &PathFunctional = &u;
    let jet = difference_jet(u_ref, hist, AUDIT_H).map_err(err)?;
    let flagged = audit_point(bumped_ref, hist, &g, &setup, &candidate_grid(jet, (0.5, 1.0), 11, 1.0))
        .map_err(err)?
        .violations
        .len();
    check(
        violations == 0 && members > 0 && flagged >= 1,
        format!("5 histories x 121 candidates: {members} jet members, {violations} violations; perturbed field flags {flagged}"),
    )
}

fn boundedness(runs: &[(&str, &PerronResult)]) -> Outcome {
    let mut worst = String::new();
    let mut ok = true;
    let mut checked = 0usize;
    for (name, r) in runs {
        let mut peak = 0.0f64;
        for d in &r.depths {
            for n in &d.nodes {
                for v in [n.upper, n.lower].iter().chain(&n.upper_field).chain(&n.lower_field) {
                    checked += 1;
                    peak = peak.max(v.abs());
                    ok &= v.abs() <= r.bound;
                }
            }
        }
        worst.push_str(&format!("{name}: max|theta|={peak:.4} bound={:.4}; ", r.bound));
    }
    check(ok, format!("{checked} values; {}", worst.trim_end_matches("; ")))
}

fn modulus_probes() -> Outcome {
    const SMALL_GAP: f64 = 5e-3;
    const MESH: f64 = 1e-3;

    let deltas: Vec<f64> = (0..10).map(|k| 0.2 * (5e-7f64 / 0.2).powf(k as f64 / 9.0)).collect();

    // Coordinates are chosen so that each segment keeps its refinement piece
    // count under the perturbation; then the refined polylines match breakpoint
    // by breakpoint and the computed distance has no mesh error.

    // Hitting times: histories ending at x and x + δ.
    let model = LatticeModel::new(&ControlBounds::canonical(1.0).map_err(err)?, 0.005).map_err(err)?;
    let mut hit = Vec::new();
    for &dl in &deltas {
        let (x1, x2) = (0.1005, 0.1005 + dl);
        let p1 = PiecewisePath::lin1(&[(1.0, x1)]).map_err(err)?;
        let p2 = PiecewisePath::lin1(&[(1.0, x2)]).map_err(err)?;
        let d = de_distance(&p1, &p2, MESH).map_err(err)?;
        hit.push((d, hitting_time_gap(&model, &q11(), x1, x2).map_err(err)?));
    }

    // Perron values of a lookback payoff: histories whose running maxima differ by δ.
    let g = GeneratorSpec::uvm(0.5, 0.0, 0.9, 1.2).map_err(err)?;
    let pay = ReducedPayoff::running_max("lookback", |_, m| m);
    let base = PerronProblem::new(PiecewisePath::zero(1), q11(), g, pay, 0.25, 0.025);
    let mut per = Vec::new();
    for &dl in &deltas {
        let w1 = PiecewisePath::lin1(&[(1.0, 0.4005), (2.0, 0.1)]).map_err(err)?;
        let w2 = PiecewisePath::lin1(&[(1.0, 0.4005 + dl), (2.0, 0.1)]).map_err(err)?;
        per.push(modulus_probe(&base, &w1, &w2, 2, MESH).map(|(gap, d)| (d, gap)).map_err(err)?);
    }

    let mut msgs = Vec::new();
    let mut ok = true;
    for (name, samples) in [("hitting", &hit), ("perron", &per)] {
        let fit = fit_modulus(samples).map_err(err)?;
        let dominated = fit.dominates(samples, 0.0);
        let small: Vec<&(f64, f64)> = samples.iter().filter(|s| s.0 <= 1e-6).collect();
        let small_ok = !small.is_empty() && small.iter().all(|s| s.1 <= SMALL_GAP);
        let tail = samples.last().unwrap();
        ok &= dominated && small_ok;
        msgs.push(format!(
            "{name}: dominated={dominated} gap(d={:.1e})={:.2e} gap(d={:.1e})={:.2e}",
            samples[0].0, samples[0].1, tail.0, tail.1
        ));
    }
    check(ok, msgs.join("; "))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, r: Outcome| {
        match &r {
            Ok(m) => println!("criterion {n:>2}: PASS | {m}"),
            Err(m) => {
                failed += 1;
                println!("criterion {n:>2}: FAIL | {m}")
            }
        }
    };
    report(1, exit_time_oracle());
    report(2, uvm_collapsed_band());
    report(3, harmonic_sanity());
    let t0 = Instant::now();
    let stress = sweep(&stress_problem(), &[1, 2, 3, 4, 5, 6]);
    let stress_secs = t0.elapsed().as_secs_f64();
    match &stress {
        Ok(r) => report(4, squeeze_monotonicity(r).map(|m| format!("{m} {stress_secs:.1}s"))),
        Err(e) => report(4, Err(err(e))),
    }
    report(5, ball_comparison());
    report(6, snell_brute_force());
    report(7, de_properties());
    report(8, viscosity_audit());
    let s2 = 2f64.sqrt();
    let collapsed = UvmSpec::new(1.0, s2, s2, 0.0, q11(), ReducedPayoff::constant(1.0))
        .and_then(|s| price_perron(&s, &PiecewisePath::zero(1), 0.1, &[2, 4], 0.01, ClosureMode::Canonical, false));
    match (&stress, &collapsed) {
        (Ok(a), Ok(b)) => report(9, boundedness(&[("stress", a), ("collapsed", b)])),
        (Err(e), _) | (_, Err(e)) => report(9, Err(err(e))),
    }
    report(10, modulus_probes());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 10 criteria passed");
}
