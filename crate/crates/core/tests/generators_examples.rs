use ppde_lab::generators::{g_lower, g_upper, Sym};
use ppde_lab::{check_assumptions, GeneratorSpec, PiecewisePath};

fn s(v: f64) -> Sym {
    Sym::from_element(1, 1, v)
}

#[test]
fn g_upper_examples() {
    assert_eq!(g_upper(0.0, &[0.0], &s(0.0), 2.0, 1.0), 1.0);
    assert_eq!(g_upper(-1.0, &[0.0], &s(0.0), 2.0, 1.0), 3.0);
    assert!((g_upper(1.0, &[1.0], &s(1.0), 2.0, 0.0) - 4.0).abs() < 1e-12);
}

#[test]
fn g_lower_examples() {
    assert_eq!(g_lower(0.0, &[0.0], &s(0.0), 2.0, 1.0), -1.0);
    assert_eq!(g_lower(1.0, &[0.0], &s(0.0), 2.0, 1.0), -3.0);
    assert!((g_lower(0.0, &[0.0], &s(1.0), 2.0, 0.0) - 0.5).abs() < 1e-12);
}

#[test]
fn uvm_examples() {
    let w = PiecewisePath::lin1(&[(1.0, 0.3)]).unwrap();
    let g = GeneratorSpec::uvm(0.5, 0.2, 0.8, 1.3).unwrap();
    assert_eq!(g.evaluate_1d(&w, 0.0, 0.0, 0.0), 0.0);
    let r2 = 2f64.sqrt();
    let g = GeneratorSpec::uvm(1.0, 0.0, r2, r2).unwrap();
    assert!((g.evaluate_1d(&w, 1.0, 0.0, 0.0) + 1.0).abs() < 1e-15);
}

#[test]
fn assumption_examples() {
    assert!(check_assumptions(&GeneratorSpec::g_upper(1, 2.0, 0.5).unwrap(), 300, 1).passed());
    assert!(check_assumptions(&GeneratorSpec::uvm(0.7, 0.3, 0.9, 1.4).unwrap(), 300, 2).passed());
    let bad = GeneratorSpec::general("increasing", 1, 2.0, 1.0, 0.0, |_, y, _, g| y + 0.5 * g[(0, 0)]).unwrap();
    assert!(check_assumptions(&bad, 300, 3).count("monotonicity") > 0);
}
