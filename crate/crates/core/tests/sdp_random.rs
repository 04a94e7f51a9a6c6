use avgbound::sdp::{solve, SdpStatus, SolveOptions};
use avgbound::testing::{kkt_residuals as kkt, random_feasible_sdp as random_problem};
use proptest::prelude::*;

#[test]
fn random_feasible_problems_reach_kkt_tolerance() {
    let opts = SolveOptions::default();
    for seed in 0..20 {
        let p = random_problem(seed);
        let s = solve(&p, &opts).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal, "seed {seed}");
        assert!(s.residuals.primal <= 1e-8);
        assert!(s.residuals.dual <= 1e-8);
        assert!(s.residuals.gap <= 1e-8);
        let (pr, du, gap) = kkt(&p, &s);
        assert!(pr <= 1e-8 && du <= 1e-8 && gap <= 1e-8, "seed {seed}: {pr:e} {du:e} {gap:e}");
        assert!(s.min_primal_eigenvalue() >= -1e-8);
        assert!(s.min_dual_eigenvalue() >= -1e-8);
        let obj = p.objective_at(&s.primal_blocks, &s.free);
        assert!((obj - s.primal_objective).abs() <= 1e-9 * (1.0 + obj.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weak_duality_holds_at_returned_points(seed in 100u64..10_000) {
        let p = random_problem(seed);
        let s = solve(&p, &SolveOptions::default()).unwrap();
        prop_assert_eq!(s.status, SdpStatus::Optimal);
        // b'y <= <C,X> + d'w up to the residual tolerance
        let scale = 1.0 + s.primal_objective.abs() + s.dual_objective.abs();
        prop_assert!(s.dual_objective <= s.primal_objective + 1e-7 * scale);
    }

    #[test]
    fn objective_scales_linearly(seed in 100u64..10_000, lambda in 0.1f64..10.0) {
        let p = random_problem(seed);
        let opts = SolveOptions::default();
        let a = solve(&p, &opts).unwrap();
        let b = solve(&p.with_scaled_objective(lambda), &opts).unwrap();
        prop_assert_eq!(b.status, SdpStatus::Optimal);
        let expect = lambda * a.primal_objective;
        prop_assert!((b.primal_objective - expect).abs() <= 1e-6 * (1.0 + expect.abs()));
    }
}
