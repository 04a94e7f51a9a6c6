use avgbound::bound::{attractor_certificate, lower_bound, upper_bound, BoundOptions};
use avgbound::models::{cylinder, ALPHA, BETA};
use avgbound::poly::{dot, Monomial, Polynomial};
use avgbound::sdp::{SdpStatus, SolveOptions};

#[test]
fn upper_bound_matches_the_limit_cycle_average() {
    let sys = cylinder();
    let c2 = upper_bound(&sys, &BoundOptions::with_degree(2)).unwrap();
    assert_eq!(c2.solve.status, SdpStatus::Optimal);
    assert!((c2.c - 6.59).abs() <= 0.05, "{}", c2.c);
    assert!(c2.recomposition_error <= 1e-6);
    for d in [4, 6] {
        let cd = upper_bound(&sys, &BoundOptions::with_degree(d)).unwrap();
        assert!((cd.c - c2.c).abs() <= 0.02, "degree {d}: {}", cd.c);
        // feasible sets are nested, so only solver noise can raise C
        assert!(cd.c <= c2.c + 1e-6, "degree {d}: {} > {}", cd.c, c2.c);
        assert!(cd.recomposition_error <= 1e-6);
    }
}

#[test]
fn quadratic_certificate_is_a_shifted_paraboloid() {
    let c = upper_bound(&cylinder(), &BoundOptions::with_degree(2)).unwrap();
    let coef = |e: [u32; 3]| c.v.coefficient(&Monomial::new(e.to_vec()));
    let (q1, q2, q3, l3) = (coef([2, 0, 0]), coef([0, 2, 0]), coef([0, 0, 2]), coef([0, 0, 1]));
    assert!(q1 > 0.0 && q3 > 0.0 && l3 < 0.0);
    assert!((q1 - q2).abs() <= 1e-6 * q1);
    // the minimizer of V sits at positive a3, the shift-mode mean
    let a3_star = -l3 / (2.0 * q3);
    assert!(a3_star > 2.0 && a3_star < 4.0, "{a3_star}");
    for e in [[1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 0, 0], [0, 1, 0]] {
        assert!(coef(e).abs() <= 1e-4 * q1, "{e:?}");
    }
}

#[test]
fn lower_bound_is_sandwiched() {
    let lo = lower_bound(&cylinder(), &BoundOptions::with_degree(2)).unwrap();
    assert!(lo.c >= -1e-6 && lo.c <= 6.59, "{}", lo.c);
}

#[test]
fn energy_is_not_an_attractor_certificate_for_the_wake_model() {
    // x . f has the cubic part (alpha - beta)(a1^2 + a2^2) a3, and any
    // nonconstant SOS multiplier makes the leading form of the body
    // negative, so no multiplier degree can work.
    let sys = cylinder();
    let x: Vec<Polynomial> = (0..3).map(|i| Polynomial::var(3, i)).collect();
    let xf = dot(&x, sys.drift());
    let cubic = xf.coefficient(&Monomial::new(vec![2, 0, 1]));
    assert!((cubic - (ALPHA - BETA)).abs() < 1e-15);
    for ds in [0, 2] {
        let cert = attractor_certificate(&sys, 100.0, ds, &SolveOptions::default()).unwrap();
        assert!(!cert.feasible, "degree {ds}");
    }
}
