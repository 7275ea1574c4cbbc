use proptest::prelude::*;

use ppde_lab::frozen_pde::{solve_dirichlet, FrozenProblem, ValueField};
use ppde_lab::generators::{g_lower, g_upper, Sym};
use ppde_lab::lattice::{
    exit_time_closed_form, snell_sup, sup_expectation, ControlBounds, LatticeModel, ReducedPayoff, StepReference,
};
use ppde_lab::perron::{sweep, PerronProblem};
use ppde_lab::uvm::{price_direct, UvmSpec};
use ppde_lab::viscosity_audit::{jet_membership, AuditSetup, JetCandidate, JetSide};
use ppde_lab::{cascade_times, de_distance, ClosureMode, ConvexDomain, GeneratorSpec, PiecewisePath};

const MESH: f64 = 1e-2;

fn path_strategy() -> impl Strategy<Value = PiecewisePath> {
    prop::collection::vec((0.1f64..2.0, -1.0f64..1.0), 1..5).prop_map(|steps| {
        let mut t = 0.0;
        let pts: Vec<(f64, f64)> = steps
            .into_iter()
            .map(|(dt, x)| {
                t += dt;
                (t, x)
            })
            .collect();
        PiecewisePath::lin1(&pts).unwrap()
    })
}

fn iv(lo: f64, hi: f64) -> ConvexDomain {
    ConvexDomain::interval(lo, hi).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn distance_is_a_pseudometric(p in path_strategy(), q in path_strategy(), r in path_strategy()) {
        let pq = de_distance(&p, &q, MESH).unwrap();
        prop_assert_eq!(pq.to_bits(), de_distance(&q, &p, MESH).unwrap().to_bits());
        let pr = de_distance(&p, &r, MESH).unwrap();
        let qr = de_distance(&q, &r, MESH).unwrap();
        prop_assert!(pr <= pq + qr + MESH);
    }

    #[test]
    fn distance_bounds_markovian_and_max_functionals(p in path_strategy(), q in path_strategy()) {
        let d = de_distance(&p, &q, MESH).unwrap();
        prop_assert!((p.final_value()[0] - q.final_value()[0]).abs() <= d + 1e-12);
        prop_assert!((p.max_norm() - q.max_norm()).abs() <= d + 1e-12);
        prop_assert!(de_distance(&p.canonicalize(), &p, MESH).unwrap() <= MESH);
    }

    #[test]
    fn concat_is_associative(a in path_strategy(), b in path_strategy(), c in path_strategy()) {
        let left = a.concat(&b).unwrap().concat(&c).unwrap();
        let right = a.concat(&b.concat(&c).unwrap()).unwrap();
        prop_assert!(de_distance(&left, &right, MESH).unwrap() <= 1e-9);
        let z = PiecewisePath::zero(1).concat(&a).unwrap();
        prop_assert!(de_distance(&z, &a, MESH).unwrap() <= 1e-9);
    }

    #[test]
    fn exit_time_flow_property(x in -0.9f64..0.9, tail in path_strategy()) {
        let q = iv(-1.0, 1.0);
        let head = PiecewisePath::lin1(&[(1.0, x)]).unwrap();
        let tail = PiecewisePath::lin1(
            &tail.breakpoints().skip(1).map(|(t, v)| (t, 3.0 * v[0])).collect::<Vec<_>>(),
        ).unwrap();
        let joined = head.concat(&tail).unwrap();
        let whole = q.exit_time(&joined).unwrap();
        let tail = tail.canonicalize();
        let part = q.shift(&[x]).unwrap().exit_time(&tail).unwrap();
        prop_assert_eq!(whole.exit_time.is_some(), part.exit_time.is_some());
        if let (Some(a), Some(b)) = (whole.exit_point, part.exit_point) {
            prop_assert!((a[0] - (x + b[0])).abs() < 1e-9);
        }
        // Times are canonical integers; they add up unless the junction merges two segments.
        let head = head.canonicalize();
        if joined.len() == head.len() + tail.len() - 1 {
            if let (Some(a), Some(b)) = (whole.exit_time, part.exit_time) {
                prop_assert!((a - (head.bar_t() + b)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cascade_times_increase(p in path_strategy(), r in 0.1f64..0.6) {
        let scaled = PiecewisePath::lin1(
            &p.breakpoints().skip(1).map(|(t, v)| (t, 4.0 * v[0])).collect::<Vec<_>>(),
        ).unwrap();
        let t = cascade_times(&iv(-r, r), &scaled, 8).unwrap();
        prop_assert!(t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn canonical_generators_sandwich_and_symmetry(
        y in -2.0f64..2.0, z in -2.0f64..2.0, gam in -3.0f64..3.0, gam2 in -3.0f64..3.0,
        rate in 0.1f64..1.5, a in 0.0f64..1.0, slo in 0.7f64..1.2, sw in 0.0f64..0.6,
    ) {
        let g = GeneratorSpec::uvm(rate, a, slo, slo + sw).unwrap();
        let (l, c) = (g.lip, g.bound);
        let w = PiecewisePath::zero(1);
        let s = |v: f64| Sym::from_element(1, 1, v);
        let v = g.evaluate_1d(&w, y, z, gam);
        prop_assert!(g_lower(y, &[z], &s(gam), l, c) <= v + 1e-12);
        prop_assert!(v <= g_upper(y, &[z], &s(gam), l, c) + 1e-12);
        let up = g_upper(y, &[z], &s(gam), l, c);
        prop_assert!((up + g_lower(-y, &[-z], &s(-gam), l, c)).abs() < 1e-12);
        let mid = g_upper(y, &[z], &s(0.5 * (gam + gam2)), l, c);
        prop_assert!(mid <= 0.5 * (up + g_upper(y, &[z], &s(gam2), l, c)) + 1e-12);
        let lmid = g_lower(y, &[z], &s(0.5 * (gam + gam2)), l, c);
        prop_assert!(lmid + 1e-12 >= 0.5 * (g_lower(y, &[z], &s(gam), l, c) + g_lower(y, &[z], &s(gam2), l, c)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn tower_property_on_lattice(
        drift in 0.0f64..1.0, vlo in 0.5f64..1.5, vw in 0.0f64..1.0, disc in 0.0f64..0.8,
        lo_v in -1.0f64..1.0, hi_v in -1.0f64..1.0, k in 2usize..8,
    ) {
        let m = LatticeModel::new(&ControlBounds::new(drift, vlo, vlo + vw, disc * 0.5, disc).unwrap(), 0.05).unwrap();
        let pay = ReducedPayoff::boundary_values(-1.0, 1.0, lo_v, hi_v);
        let z = PiecewisePath::zero(1);
        let one = sup_expectation(&m, &pay, &iv(-1.0, 1.0), 0.3, &z).unwrap();
        let r = 0.05 * (2 * k) as f64;
        let inner_pay = ReducedPayoff::boundary_values(-r, r, one.value_at(&[-r], 0.0), one.value_at(&[r], 0.0));
        let two = sup_expectation(&m, &inner_pay, &iv(-r, r), 0.3, &z).unwrap();
        for (x, v) in two.nodes().iter().zip(&two.values[0]) {
            prop_assert!((v - one.value_at(&[*x], 0.0)).abs() < 1e-9, "x={} {} vs {}", x, v, one.value_at(&[*x], 0.0));
        }
    }

    #[test]
    fn snell_dominates_obstacle_and_continuation(c0 in -1.0f64..1.0, c1 in -2.0f64..2.0, c2 in -2.0f64..2.0) {
        let m = LatticeModel::new(&ControlBounds::new(0.5, 0.8, 1.6, 0.0, 0.4).unwrap(), 0.05).unwrap();
        let f = move |x: &[f64]| c0 + c1 * x[0] + c2 * (3.0 * x[0]).sin();
        let obstacle = ReducedPayoff::markovian("f", f);
        let z = PiecewisePath::zero(1);
        let s = snell_sup(&m, &obstacle, &iv(-1.0, 1.0), &z).unwrap();
        let run = sup_expectation(&m, &obstacle, &iv(-1.0, 1.0), 0.0, &z).unwrap();
        for (i, x) in s.field.nodes().iter().enumerate() {
            let y = s.field.values[0][i];
            prop_assert!(y >= f(&[*x]) - 1e-12);
            prop_assert!(y >= run.values[0][i] - 1e-9);
        }
    }

    #[test]
    fn exit_value_tracks_closed_form(l in 1.0f64..1.5, r in 0.5f64..1.2) {
        let h = r / 100.0;
        let (lo, hi) = ppde_lab::generators::vol_band(l);
        let m = LatticeModel::new(&ControlBounds::new(l, lo, hi, 0.0, 0.0).unwrap(), h).unwrap();
        let f = sup_expectation(&m, &ReducedPayoff::constant(0.0), &iv(-r, r), 1.0, &PiecewisePath::zero(1)).unwrap();
        let scale = 1.0 + exit_time_closed_form(l, r, 0.0).unwrap();
        for k in 0..=10 {
            let x = (-r + 0.2 * r * k as f64).clamp(-r, r);
            let e = (f.value_at(&[x], 0.0) - exit_time_closed_form(l, r, x).unwrap()).abs();
            prop_assert!(e <= 2.0 * h * scale, "x={} err={}", x, e);
        }
    }
}

fn solve_with(g: &GeneratorSpec, a: f64, b: f64, h: f64, step: StepReference) -> ValueField {
    let mut p = FrozenProblem::new(PiecewisePath::zero(1), iv(-1.0, 1.0), g.clone(), a, b, h);
    p.step = Some(step);
    solve_dirichlet(&p).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn frozen_solutions_are_ordered_and_bounded(
        rate in 0.2f64..1.0, a in 0.0f64..0.8, slo in 0.8f64..1.2, sw in 0.0f64..0.5,
        b1 in -1.0f64..1.0, b2 in -1.0f64..1.0, d1 in 0.0f64..0.5, d2 in 0.0f64..0.5,
    ) {
        let g = GeneratorSpec::uvm(rate, a, slo, slo + sw).unwrap();
        let step = LatticeModel::new(&ControlBounds::canonical(g.lip).unwrap(), 0.02).unwrap().step;
        let v = solve_with(&g, b1, b2, 0.02, step);
        let w = solve_with(&g, b1 + d1, b2 + d2, 0.02, step);
        prop_assert!(v.values.iter().zip(&w.values).all(|(p, q)| p <= &(q + 1e-10)));
        let up = solve_with(&GeneratorSpec::g_upper(1, g.lip, g.bound).unwrap(), b1, b2, 0.02, step);
        let lo = solve_with(&GeneratorSpec::g_lower(1, g.lip, g.bound).unwrap(), b1, b2, 0.02, step);
        for i in 0..v.values.len() {
            prop_assert!(lo.values[i] <= v.values[i] + 1e-10 && v.values[i] <= up.values[i] + 1e-10);
        }
        let bound = g.lambda_inverse(g.bound) + g.bound + b1.abs().max(b2.abs());
        prop_assert!(v.values.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn halving_h_moves_values_by_order_h(rate in 0.2f64..1.0, slo in 0.8f64..1.2, sw in 0.0f64..0.5, b in -1.0f64..1.0) {
        let g = GeneratorSpec::uvm(rate, 0.3, slo, slo + sw).unwrap();
        let v = |h: f64| {
            let step = LatticeModel::new(&ControlBounds::canonical(g.lip).unwrap(), h).unwrap().step;
            solve_with(&g, b, 1.0, h, step).value_at(0.0)
        };
        let h = 0.04;
        prop_assert!((v(h) - v(h / 2.0)).abs() <= h);
    }

    #[test]
    fn uvm_price_monotone_in_upper_vol(rate in 0.2f64..1.0, slo in 0.6f64..1.0, w1 in 0.0f64..0.4, w2 in 0.0f64..0.4) {
        let pay = ReducedPayoff::boundary_values(-1.0, 1.0, 0.3, 1.0);
        let price = |shi: f64| {
            let s = UvmSpec::new(rate, slo, shi, 0.0, iv(-1.0, 1.0), pay.clone()).unwrap();
            price_direct(&s, &PiecewisePath::zero(1), 0.02).unwrap().start_value
        };
        let (a, b) = (slo + w1.min(w2), slo + w1.max(w2));
        prop_assert!(price(a) <= price(b) + 1e-10);
    }

    #[test]
    fn single_vol_price_is_linear(rate in 0.2f64..1.0, sig in 0.7f64..1.4, c1 in -2.0f64..2.0, c2 in -2.0f64..2.0) {
        let price = |f: ReducedPayoff| {
            let s = UvmSpec::new(rate, sig, sig, 0.0, iv(-1.0, 1.0), f).unwrap();
            price_direct(&s, &PiecewisePath::zero(1), 0.02).unwrap().start_value
        };
        let f = ReducedPayoff::boundary_values(-1.0, 1.0, 1.0, -0.5);
        let g = ReducedPayoff::boundary_values(-1.0, 1.0, 0.2, 0.9);
        let mix = ReducedPayoff::boundary_values(-1.0, 1.0, c1 + 0.2 * c2, -0.5 * c1 + 0.9 * c2);
        prop_assert!((price(mix) - (c1 * price(f) + c2 * price(g))).abs() < 1e-9);
    }

    #[test]
    fn perron_bracket_is_ordered(rate in 0.3f64..1.0, slo in 0.9f64..1.1, sw in 0.0f64..0.4, c in 0.0f64..0.5) {
        let g = GeneratorSpec::uvm(rate, 0.2, slo, slo + sw).unwrap().with_bound(0.05 + c).unwrap();
        let pay = ReducedPayoff::markovian("g", |x| x[0] - 0.3 * x[0] * x[0]);
        let p = PerronProblem::new(PiecewisePath::zero(1), iv(-1.0, 1.0), g, pay, 0.5, 0.05);
        for d in &sweep(&p, &[1, 2, 3]).unwrap().depths {
            for n in &d.nodes {
                prop_assert!(n.lower <= n.upper + 1e-9);
            }
        }
    }

    #[test]
    fn perron_values_within_bound_with_tight_closures(rate in 0.3f64..1.0, slo in 0.9f64..1.1, sw in 0.0f64..0.4, a in 0.0f64..0.5) {
        let g = GeneratorSpec::uvm(rate, a, slo, slo + sw).unwrap();
        let pay = ReducedPayoff::markovian("g", |x| x[0] - 0.3 * x[0] * x[0]);
        let mut p = PerronProblem::new(PiecewisePath::zero(1), iv(-1.0, 1.0), g, pay, 0.5, 0.05);
        p.closure = ClosureMode::Tight;
        let r = sweep(&p, &[1, 2, 3]).unwrap();
        for d in &r.depths {
            for n in &d.nodes {
                for v in [n.upper, n.lower].iter().chain(&n.upper_field).chain(&n.lower_field) {
                    prop_assert!(v.abs() <= r.bound, "{} > {}", v, r.bound);
                }
            }
        }
    }

    #[test]
    fn jets_are_monotone_in_curvature(alpha in -0.5f64..0.5, beta in -2.0f64..2.0, bump in 0.0f64..2.0, x0 in -0.4f64..0.4) {
        let u = |p: &PiecewisePath| Ok((p.final_value()[0]).cosh() + 0.3 * p.final_value()[0]);
        let setup = AuditSetup { q: iv(-1.0, 1.0), eps: 0.2, h: 0.02, membership_tol: 1e-10, generator_tol: 0.1 };
        let hist = PiecewisePath::lin1(&[(1.0, x0)]).unwrap();
        let c1 = JetCandidate { alpha, beta, level: 1.0 };
        let c2 = JetCandidate { alpha, beta: beta + bump, level: 1.0 };
        let m1 = jet_membership(&u, &hist, &c1, JetSide::Sub, &setup).unwrap();
        let m2 = jet_membership(&u, &hist, &c2, JetSide::Sub, &setup).unwrap();
        prop_assert!(!m1.member || m2.member);
        let s1 = jet_membership(&u, &hist, &c2, JetSide::Super, &setup).unwrap();
        let s2 = jet_membership(&u, &hist, &c1, JetSide::Super, &setup).unwrap();
        prop_assert!(!s1.member || s2.member);
    }

    #[test]
    fn jet_verdicts_ignore_reparameterization(alpha in -0.5f64..0.5, beta in -2.0f64..2.0, x1 in -0.4f64..0.4, x2 in -0.4f64..0.4) {
        let u = |p: &PiecewisePath| Ok(p.running_max() + 0.5 * p.final_value()[0]);
        let setup = AuditSetup { q: iv(-1.0, 1.0), eps: 0.2, h: 0.02, membership_tol: 1e-10, generator_tol: 0.1 };
        let a = PiecewisePath::lin1(&[(1.0, x1), (2.0, x2)]).unwrap();
        let b = PiecewisePath::lin1(&[(0.25, x1), (9.0, x2)]).unwrap();
        let c = JetCandidate { alpha, beta, level: 1.0 };
        for side in [JetSide::Sub, JetSide::Super] {
            let ma = jet_membership(&u, &a, &c, side, &setup).unwrap();
            let mb = jet_membership(&u, &b, &c, side, &setup).unwrap();
            prop_assert_eq!(ma.member, mb.member);
            prop_assert!((ma.envelope - mb.envelope).abs() < 1e-12);
        }
    }
}
