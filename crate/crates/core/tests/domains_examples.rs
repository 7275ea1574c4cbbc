use ppde_lab::{cascade_times, eps_localized, ConvexDomain, PiecewisePath};

fn iv(lo: f64, hi: f64) -> ConvexDomain {
    ConvexDomain::interval(lo, hi).unwrap()
}

#[test]
fn contains_examples() {
    let b = ConvexDomain::ball(2, 1.0).unwrap();
    assert!(b.contains(&[0.0, 0.0]));
    assert!(!b.contains(&[1.0, 0.0]));
    assert!(iv(-1.0, 1.0).contains(&[0.999]));
}

#[test]
fn shift_examples() {
    let d = iv(-1.0, 1.0);
    assert_eq!(d.shift(&[0.0]).unwrap(), d);
    assert_eq!(d.shift(&[0.5]).unwrap(), iv(-1.5, 0.5));
    let s = ConvexDomain::ball(2, 1.0).unwrap().shift(&[0.5, 0.0]).unwrap();
    assert!(s.contains(&[0.0, 0.0]));
}

#[test]
fn exit_time_examples() {
    let r = iv(-1.0, 1.0).exit_time(&PiecewisePath::lin1(&[(1.0, 2.0)]).unwrap()).unwrap();
    assert!((r.exit_time.unwrap() - 0.5).abs() < 1e-12);
    assert!((r.exit_point.unwrap()[0] - 1.0).abs() < 1e-12);
    let r = iv(-1.0, 1.0).exit_time(&PiecewisePath::lin1(&[(1.0, 0.5)]).unwrap()).unwrap();
    assert_eq!(r.exit_time, None);
    let p = PiecewisePath::lin_interp(2, &[(1.0, vec![2.0, 0.0])]).unwrap();
    let r = ConvexDomain::ball(2, 1.0).unwrap().exit_time(&p).unwrap();
    assert!((r.exit_time.unwrap() - 0.5).abs() < 1e-12);
    let e = r.exit_point.unwrap();
    assert!((e[0] - 1.0).abs() < 1e-12 && e[1].abs() < 1e-12);
}

#[test]
fn cascade_examples() {
    let t = cascade_times(&iv(-1.0, 1.0), &PiecewisePath::lin1(&[(1.0, 3.0)]).unwrap(), 3).unwrap();
    assert_eq!(t.len(), 3);
    for (a, b) in t.iter().zip([1.0 / 3.0, 2.0 / 3.0, 1.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(cascade_times(&iv(-1.0, 1.0), &PiecewisePath::zero(1), 5).unwrap().is_empty());
    let t = cascade_times(&iv(-1.0, 1.0), &PiecewisePath::lin1(&[(1.0, 1.5)]).unwrap(), 2).unwrap();
    assert_eq!(t.len(), 1);
    assert!((t[0] - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn localization_examples() {
    let z = PiecewisePath::zero(1);
    let d = eps_localized(0.25, &iv(-1.0, 1.0), &z).unwrap();
    assert_eq!(d.as_interval().unwrap(), (-0.25, 0.25));
    let h = PiecewisePath::lin1(&[(1.0, 0.75)]).unwrap();
    let (lo, hi) = eps_localized(0.5, &iv(-1.0, 1.0), &h).unwrap().as_interval().unwrap();
    assert!((lo + 0.5).abs() < 1e-12 && (hi - 0.25).abs() < 1e-12);
    let d = eps_localized(0.5, &ConvexDomain::ball(2, 1.0).unwrap(), &PiecewisePath::zero(2)).unwrap();
    assert!(d.contains(&[0.49, 0.0]) && !d.contains(&[0.51, 0.0]) && !d.contains(&[0.0, -0.51]));
}
