//! End-to-end checks on the cylinder wake model. Prints one PASS/FAIL line
//! per criterion and fails if any criterion fails.

use std::path::PathBuf;
use std::process::Command;

use anyhow::{anyhow, ensure, Result};
use avgbound::bound::{lower_bound, upper_bound, BoundKind, BoundOptions};
use avgbound::config::{load_config, LoadedSystem};
use avgbound::sdp::{solve, SolveOptions};
use avgbound::sim::{
    bisect, check_bound, detect_thresholds, find_equilibria, has_extra_equilibria, integrate,
    sweep_eps, time_average, EquilibriumSearch, SimConfig, SweepBounds,
};
use avgbound::sos::MultiplierSign;
use avgbound::synthesis::{assemble, refine_fixed_eps, step, ExpansionState, RefineOptions, StepOptions};
use avgbound::testing::{kkt_residuals, random_feasible_sdp, random_polynomial};
use avgbound_cli::{export_and_check, read_controller, EXTERNAL_TOLERANCE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PUBLISHED_EPS: f64 = 8.7e-4;
const KAPPA: f64 = 0.5;

fn systems_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../systems")
}

fn cylinder() -> LoadedSystem {
    load_config(&systems_dir().join("cylinder.toml")).expect("shipped system loads")
}

fn within(x: f64, target: f64, rel: f64) -> bool {
    (x - target).abs() <= rel * target.abs()
}

/// `bound` through the binary, returning `C`.
fn cli_bound(dv: u32) -> Result<f64> {
    let out = Command::new(env!("CARGO_BIN_EXE_avgbound"))
        .arg("bound")
        .arg("--system")
        .arg(systems_dir().join("cylinder.toml"))
        .args(["--dv", &dv.to_string()])
        .output()?;
    ensure!(out.status.success(), "bound failed: {}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout)?;
    v["result"]["C"].as_f64().ok_or_else(|| anyhow!("no C in the artifact"))
}

fn first_step(sign: MultiplierSign, degree: u32) -> Result<ExpansionState> {
    let sys = cylinder().system;
    let mut state = ExpansionState::new();
    step(&mut state, &sys, &StepOptions::default())?;
    let opts = StepOptions {
        v_degree: degree,
        u_degree: degree,
        multiplier_sign: sign,
        rho: Some(400.0),
        ..Default::default()
    };
    step(&mut state, &sys, &opts)?;
    Ok(state)
}

fn uncontrolled_bound() -> Result<(bool, String)> {
    let c2 = cli_bound(2)?;
    let c4 = cli_bound(4)?;
    let c6 = cli_bound(6)?;
    let spread = (c4 - c2).abs().max((c6 - c2).abs());
    let pass = (6.54..=6.64).contains(&c2) && spread <= 0.02;
    Ok((
        pass,
        format!("C(dV=2) = {c2:.6} in [6.54, 6.64]; C(dV=4) = {c4:.6}, C(dV=6) = {c6:.6}, max change {spread:.2e} <= 0.02"),
    ))
}

fn ground_truth() -> Result<(bool, String)> {
    let loaded = cylinder();
    let cfg = SimConfig {
        x0: vec![-0.3, -0.3, 0.3],
        ..loaded.sim_config()
    };
    let rep = time_average(&loaded.system, None, &cfg)?;
    let ring = rep.mean_square[0] + rep.mean_square[1];
    let shift = rep.mean[2];
    let pass = within(rep.phi_bar, 6.584, 0.01) && within(ring, 6.560, 0.01) && within(shift, 2.570, 0.01);
    Ok((
        pass,
        format!(
            "phi_bar = {:.4} (6.584 +-1%), mean a1^2+a2^2 = {ring:.4} (6.560 +-1%), mean a3 = {shift:.4} (2.570 +-1%)",
            rep.phi_bar
        ),
    ))
}

fn sos_multiplier_degeneracy() -> Result<(bool, String)> {
    let c2 = first_step(MultiplierSign::Sos, 2)?.c()[1];
    let c4 = first_step(MultiplierSign::Sos, 4)?.c()[1];
    let pass = c2.abs() <= 1e-4 && c4.abs() <= 1e-4;
    Ok((pass, format!("C1(deg 2) = {c2:.2e}, C1(deg 4) = {c4:.2e}, both within 1e-4 of 0")))
}

fn free_multiplier_step() -> Result<(bool, String)> {
    let loaded = cylinder();
    let sys = &loaded.system;
    let state = first_step(MultiplierSign::Free, 2)?;
    let c = state.c();
    let a = assemble(&state, sys, PUBLISHED_EPS, KAPPA, 1)?;
    let sim = time_average(sys, Some(&a.controller), &loaded.sim_config())?;
    let pass = c[1] <= -250.0 && a.bound.value > sim.phi_bar;
    Ok((
        pass,
        format!(
            "C1 = {:.2} <= -250 (rho = 400); C0 + eps kappa C1 = {:.5} > simulated phi_bar = {:.5} at eps = {PUBLISHED_EPS}",
            c[1], a.bound.value, sim.phi_bar
        ),
    ))
}

fn stabilization_window() -> Result<(bool, String)> {
    let loaded = cylinder();
    let sys = &loaded.system;
    let ctl = read_controller(&systems_dir().join("cylinder_u1.json"))?;
    let cfg = loaded.sim_config();
    let search = EquilibriumSearch::default();
    let grid: Vec<f64> = (0..=50).map(|k| k as f64 * 0.002).collect();
    let bounds = SweepBounds {
        refine: None,
        ..Default::default()
    };
    let rows = sweep_eps(sys, &ctl, &grid, &cfg, &bounds, &search);
    let th = detect_thresholds(sys, &ctl, &rows, &cfg, &search, 1e-4);
    let (e1, e2) = match (th.eps1, th.eps2) {
        (Some(a), Some(b)) => (a, b),
        _ => return Ok((false, format!("thresholds not bracketed: {th:?}"))),
    };
    let mut norms = Vec::new();
    for frac in [0.25, 0.5, 0.75] {
        let eps = e1 + frac * (e2 - e1);
        let traj = integrate(sys, Some(&ctl.with_epsilon(eps)), &cfg)?;
        norms.push((eps, traj.last().iter().map(|v| v * v).sum::<f64>().sqrt()));
    }
    let pass = (0.0117..=0.0137).contains(&e1)
        && (0.0712..=0.0772).contains(&e2)
        && norms.iter().all(|&(_, n)| n < 1e-3);
    let inside: Vec<String> = norms.iter().map(|(e, n)| format!("|x(T)|({e:.4}) = {n:.1e}")).collect();
    Ok((
        pass,
        format!(
            "eps1 = {e1:.5} in [0.0117, 0.0137], eps2 = {e2:.5} in [0.0712, 0.0772]; {} (< 1e-3)",
            inside.join(", ")
        ),
    ))
}

fn bifurcation_structure() -> Result<(bool, String)> {
    let loaded = cylinder();
    let sys = &loaded.system;
    let ctl = read_controller(&systems_dir().join("cylinder_u1.json"))?;
    let search = EquilibriumSearch::default();
    let extra = |e: f64| has_extra_equilibria(sys, &ctl.with_epsilon(e), &search);
    let (lo, hi) = (0.07, 0.08);
    ensure!(!extra(lo) && extra(hi), "no fold between {lo} and {hi}");
    let fold = bisect(lo, hi, 1e-8, extra);
    let at = ctl.with_epsilon(fold);
    let eq = find_equilibria(sys, Some(&at), &search)?;
    let feedback = at.feedback();
    let published = [[0.6988, 2.362, 2.377], [0.7000, 2.364, 2.382]];
    let mut nonzero = 0;
    let mut worst_dist: f64 = 0.0;
    let mut worst_cost: f64 = 0.0;
    let mut has_origin = false;
    let mut costs = Vec::new();
    for e in &eq {
        let x = &e.point;
        if x.iter().all(|v| v.abs() < 1e-9) {
            has_origin = true;
            continue;
        }
        nonzero += 1;
        let dist = published
            .iter()
            .map(|p| {
                (x[0].abs() - p[0]).abs().max((x[1].abs() - p[1]).abs()).max((x[2] - p[2]).abs())
            })
            .fold(f64::INFINITY, f64::min);
        worst_dist = worst_dist.max(dist);
        let u: Vec<f64> = feedback.iter().map(|p| p.eval_unchecked(x)).collect();
        let phi = sys.cost_at(x, &u);
        worst_cost = worst_cost.max((phi - 171.55).abs() / 171.55);
        costs.push(format!("{phi:.2}"));
    }
    let pass = has_origin && nonzero == 4 && worst_dist <= 5e-3 && worst_cost <= 0.02;
    Ok((
        pass,
        format!(
            "fold at eps = {fold:.8}: origin {has_origin}, {nonzero} nonzero equilibria (want 4), max coordinate error {worst_dist:.1e} <= 5e-3, phi = [{}] (171.55 +-2%)",
            costs.join(", ")
        ),
    ))
}

fn fixed_amplitude_tightness() -> Result<(bool, String)> {
    let loaded = cylinder();
    let sys = &loaded.system;
    let ctl = read_controller(&systems_dir().join("cylinder_u1.json"))?;
    let at = ctl.with_epsilon(PUBLISHED_EPS);
    let opts = RefineOptions::default();
    let c = refine_fixed_eps(sys, &at, &[], &opts)?.c;
    let phi_bar = time_average(sys, Some(&at), &loaded.sim_config())?.phi_bar;
    let tight = phi_bar <= c && c <= 1.05 * phi_bar;

    let mut state = ExpansionState::new();
    step(&mut state, sys, &StepOptions::default())?;
    let at = ctl.with_epsilon(3e-3);
    let plain = refine_fixed_eps(sys, &at, &state.residuals(), &opts)?.c;
    let relaxed = refine_fixed_eps(
        sys,
        &at,
        &state.residuals(),
        &RefineOptions {
            relax: true,
            ..opts.clone()
        },
    )?
    .c;
    let pass = tight && relaxed <= plain + 1e-6;
    Ok((
        pass,
        format!(
            "eps = {PUBLISHED_EPS}: phi_bar = {phi_bar:.6} <= C = {c:.6} <= 1.05 phi_bar; eps = 3e-3: C_relaxed = {relaxed:.6} <= C = {plain:.6} (+1e-6 solver noise)"
        ),
    ))
}

fn property_suites() -> Result<(bool, String)> {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut worst_product: f64 = 0.0;
    let mut worst_poly: f64 = 0.0;
    for _ in 0..20 {
        let p = random_polynomial(&mut rng, 3, 4, 8);
        let q = random_polynomial(&mut rng, 3, 4, 8);
        let pq = &p * &q;
        let grad = p.gradient();
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let want = p.eval_unchecked(&x) * q.eval_unchecked(&x);
            let got = pq.eval_unchecked(&x);
            // relative to the summand magnitudes, which bound the rounding
            let size = |r: &avgbound::Polynomial| -> f64 {
                r.terms().map(|(m, c)| (c * m.evaluate(&x)).abs()).sum()
            };
            worst_product = worst_product.max((got - want).abs() / (size(&p) * size(&q)).max(1e-300));
            for (i, g) in grad.iter().enumerate() {
                let h = 1e-5;
                let mut up = x.clone();
                let mut down = x.clone();
                up[i] += h;
                down[i] -= h;
                let fd = (p.eval_unchecked(&up) - p.eval_unchecked(&down)) / (2.0 * h);
                let exact = g.eval_unchecked(&x);
                worst_poly = worst_poly.max((fd - exact).abs() / exact.abs().max(1.0));
            }
        }
    }
    if worst_product > 1e-10 || worst_poly > 1e-6 {
        failures.push(format!("polynomial oracles {worst_product:e} / {worst_poly:e}"));
    }

    let sys = cylinder().system;
    let mut recomposition: f64 = 0.0;
    let mut upper = Vec::new();
    let mut lower = Vec::new();
    for d in [2, 4, 6] {
        let up = upper_bound(&sys, &BoundOptions::with_degree(d))?;
        let lo = lower_bound(&sys, &BoundOptions::with_degree(d))?;
        recomposition = recomposition.max(up.recomposition_error).max(lo.recomposition_error);
        upper.push(up);
        lower.push(lo.c);
    }
    let mut step_one = Vec::new();
    for sign in [MultiplierSign::Sos, MultiplierSign::Free] {
        let state = first_step(sign, 2)?;
        recomposition = recomposition.max(state.steps()[1].recomposition_error);
        step_one.push(state.c()[1]);
    }
    if recomposition > 1e-6 {
        failures.push(format!("recomposition {recomposition:e}"));
    }
    let monotone = upper.windows(2).all(|w| w[1].c <= w[0].c + 1e-6)
        && lower.windows(2).all(|w| w[1] >= w[0] - 1e-6);
    if !monotone {
        failures.push("degree monotonicity".into());
    }
    if step_one.iter().any(|&c| c > 1e-9) {
        failures.push(format!("step-1 optimum {step_one:?}"));
    }

    let mut worst_kkt: f64 = 0.0;
    for seed in 0..20 {
        let p = random_feasible_sdp(seed);
        let s = solve(&p, &SolveOptions::default())?;
        let (pr, du, gap) = kkt_residuals(&p, &s);
        worst_kkt = worst_kkt.max(pr).max(du).max(gap);
    }
    if worst_kkt > 1e-8 {
        failures.push(format!("KKT {worst_kkt:e}"));
    }

    let cfg = SimConfig {
        horizon: 300.0,
        ..SimConfig::default()
    };
    let mut worst_h = f64::NEG_INFINITY;
    for _ in 0..10 {
        let x0: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let check = check_bound(&upper[0], &sys, None, &cfg.with_x0(x0))?;
        if check.violated {
            failures.push(format!("certificate violated at {:?}", check.at));
        }
        worst_h = worst_h.max(check.max_h);
    }

    Ok((
        failures.is_empty(),
        format!(
            "product {worst_product:.1e} <= 1e-10, gradient {worst_poly:.1e} <= 1e-6, recomposition {recomposition:.1e} <= 1e-6, KKT {worst_kkt:.1e} <= 1e-8 (20 problems), monotone {monotone}, max H - C on trajectories {worst_h:.2e}, step-1 C1 {:.2e} and {:.2e} <= 1e-9{}",
            step_one[0],
            step_one[1],
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    ))
}

fn interop() -> Result<(bool, String)> {
    let loaded = cylinder();
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("upper_bound.dat-s");
    let report = export_and_check(&loaded, BoundKind::Upper, 2, &SolveOptions::default(), &path, true)?;
    let exact = report.round_trip_exact == Some(true);
    let internal = report.internal.as_ref().map_or(f64::NAN, |r| r.objective);
    match &report.external {
        Some(e) => Ok((
            exact && e.agrees,
            format!(
                "round trip exact {exact}; {} objective {:.9} vs internal {internal:.9}, difference {:.1e} <= {EXTERNAL_TOLERANCE:e}",
                e.solver, e.objective, e.difference
            ),
        )),
        None => Ok((
            exact,
            format!(
                "round trip exact {exact}; external comparison skipped ({})",
                report.external_skipped.as_deref().unwrap_or("unknown reason")
            ),
        )),
    }
}

#[test]
fn acceptance() {
    type Check = fn() -> Result<(bool, String)>;
    let criteria: [(&str, Check); 9] = [
        ("uncontrolled bound", uncontrolled_bound),
        ("simulated ground truth", ground_truth),
        ("SOS-multiplier degeneracy", sos_multiplier_degeneracy),
        ("free-multiplier first step", free_multiplier_step),
        ("stabilization window", stabilization_window),
        ("bifurcation structure", bifurcation_structure),
        ("fixed-amplitude tightness", fixed_amplitude_tightness),
        ("property suites", property_suites),
        ("SDPA interop", interop),
    ];
    let mut failed = Vec::new();
    println!();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e:#}")));
        println!("{} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" }, i + 1);
        if !pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
