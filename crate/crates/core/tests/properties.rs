use avgbound::bound::{lower_bound, upper_bound, BoundOptions};
use avgbound::models::{cylinder, cylinder_reference_u1};
use avgbound::poly::{parse_poly, Polynomial};
use avgbound::sdp::{SdpStatus, SolveOptions};
use avgbound::sim::{find_equilibria, time_average, EquilibriumSearch, SimConfig};
use avgbound::sos::{DecisionPoly, LinearExpr, SosProgram};
use avgbound::synthesis::Controller;
use avgbound::testing::random_polynomial;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).collect()
}

fn point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn product_evaluates_to_product_of_values(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_polynomial(&mut rng, n, 4, 8);
        let q = random_polynomial(&mut rng, n, 4, 8);
        let pq = &p * &q;
        for _ in 0..50 {
            let x = point(&mut rng, n);
            let (a, b) = (p.evaluate(&x).unwrap(), q.evaluate(&x).unwrap());
            let got = pq.evaluate(&x).unwrap();
            // relative to the size of the summands, so cancellation is fair
            let scale = p.terms().map(|(_, c)| c.abs()).sum::<f64>()
                * q.terms().map(|(_, c)| c.abs()).sum::<f64>()
                * 2f64.powi(8);
            prop_assert!((got - a * b).abs() <= 1e-10 * scale.max(1.0), "{got} vs {}", a * b);
        }
    }

    #[test]
    fn gradient_matches_central_differences(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_polynomial(&mut rng, n, 5, 10);
        let grad = p.gradient();
        let h = 1e-5;
        for _ in 0..10 {
            let x = point(&mut rng, n);
            for (i, gi) in grad.iter().enumerate() {
                let mut up = x.clone();
                let mut down = x.clone();
                up[i] += h;
                down[i] -= h;
                let fd = (p.evaluate(&up).unwrap() - p.evaluate(&down).unwrap()) / (2.0 * h);
                let exact = gi.evaluate(&x).unwrap();
                prop_assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1.0), "{fd} vs {exact}");
            }
        }
    }

    #[test]
    fn parse_print_parse_is_a_fixed_point(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vars = names(n);
        let p = random_polynomial(&mut rng, n, 4, 6);
        let text = p.display(&vars).to_string();
        let q = parse_poly(&text, &vars).unwrap();
        prop_assert_eq!(q.display(&vars).to_string(), text);
        prop_assert!(q.max_coefficient_diff(&p) <= 1e-12 * p.max_abs_coefficient().max(1.0));
    }

    #[test]
    fn identity_substitution_is_exact(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_polynomial(&mut rng, n, 5, 10);
        let identity: Vec<Polynomial> = (0..n).map(|i| Polynomial::var(n, i)).collect();
        prop_assert_eq!(p.compose(&identity).unwrap(), p);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sums_of_squares_compile_feasibly(seed in any::<u64>(), n in 1usize..3, half in 1u32..3, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut body = Polynomial::zero(n);
        for _ in 0..k {
            let q = random_polynomial(&mut rng, n, half, 4);
            body = &body + &(&q * &q);
        }
        let mut prog = SosProgram::new(n);
        prog.add_sos("body", DecisionPoly::from_poly(&body)).unwrap();
        let sol = prog.solve(&SolveOptions::default()).unwrap();
        prop_assert!(sol.status.is_usable(), "{:?}", sol.status);
        prop_assert!(sol.max_recomposition_error() <= 1e-6, "{}", sol.max_recomposition_error());
    }

    #[test]
    fn known_minimum_is_recovered(a in -3.0f64..3.0, b in -5.0f64..5.0, s in 0.1f64..4.0) {
        // largest c with s (x - a)^2 + b - c SOS is b
        let x = Polynomial::var(1, 0);
        let shifted = &x - &Polynomial::constant(1, a);
        let p = &(&shifted * &shifted).scale(s) + &Polynomial::constant(1, b);
        let mut prog = SosProgram::new(1);
        let c = prog.new_scalar("c").unwrap();
        let mut body = DecisionPoly::from_poly(&p);
        body.add_scaled(&DecisionPoly::scalar(1, c), -1.0);
        prog.add_sos("body", body).unwrap();
        prog.minimize(LinearExpr::term(c, -1.0)).unwrap();
        let sol = prog.solve(&SolveOptions::default()).unwrap();
        prop_assert_eq!(sol.status, SdpStatus::Optimal);
        prop_assert!((sol.scalar("c").unwrap() - b).abs() <= 1e-6);
        prop_assert!((sol.objective + b).abs() <= 1e-6);
        prop_assert!(sol.max_recomposition_error() <= 1e-6);
    }
}

#[test]
fn bounds_are_monotone_in_degree_and_sandwich_the_average() {
    let sys = cylinder();
    let mut prev_up = f64::INFINITY;
    let mut prev_lo = f64::NEG_INFINITY;
    for d in [2, 4, 6] {
        let up = upper_bound(&sys, &BoundOptions::with_degree(d)).unwrap();
        let lo = lower_bound(&sys, &BoundOptions::with_degree(d)).unwrap();
        assert!(up.c <= prev_up + 1e-6, "degree {d}: {} > {prev_up}", up.c);
        assert!(lo.c >= prev_lo - 1e-6, "degree {d}: {} < {prev_lo}", lo.c);
        assert!(up.recomposition_error <= 1e-6 && lo.recomposition_error <= 1e-6);
        prev_up = up.c;
        prev_lo = lo.c;
    }
    let avg = time_average(&sys, None, &SimConfig::default()).unwrap().phi_bar;
    assert!(prev_lo <= avg && avg <= prev_up, "{prev_lo} <= {avg} <= {prev_up}");
}

#[test]
fn reported_equilibria_are_roots() {
    let sys = cylinder();
    let base = Controller::first_order(&sys, vec![cylinder_reference_u1()], 0.0, 0.5);
    for eps in [0.0, 0.005, 0.03, 0.08, 0.1] {
        let eq = find_equilibria(&sys, Some(&base.with_epsilon(eps)), &EquilibriumSearch::default()).unwrap();
        assert!(!eq.is_empty());
        for e in &eq {
            assert!(e.residual <= 1e-8, "eps {eps}: {e:?}");
        }
    }
}
