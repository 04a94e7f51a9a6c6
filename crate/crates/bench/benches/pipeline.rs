use std::hint::black_box;

use avgbound::bound::{upper_bound, BoundOptions};
use avgbound::models::cylinder;
use avgbound::sim::{find_equilibria, time_average, EquilibriumSearch, SimConfig};
use avgbound::synthesis::{refine_fixed_eps, step, ExpansionState, RefineOptions, StepOptions};
use avgbound_bench::cylinder_with_feedback;
use criterion::{criterion_group, criterion_main, Criterion};

fn bounds(c: &mut Criterion) {
    let sys = cylinder();
    let mut g = c.benchmark_group("upper_bound");
    for d in [2, 4, 6] {
        g.bench_function(format!("degree_{d}"), |b| {
            b.iter(|| upper_bound(black_box(&sys), &BoundOptions::with_degree(d)).unwrap())
        });
    }
    g.finish();
}

fn synthesis(c: &mut Criterion) {
    let sys = cylinder();
    let mut base = ExpansionState::new();
    step(&mut base, &sys, &StepOptions::default()).unwrap();
    c.bench_function("first_order_step", |b| {
        b.iter(|| {
            let mut state = base.clone();
            step(&mut state, &sys, &StepOptions::default()).unwrap().c
        })
    });
    let (sys, ctl) = cylinder_with_feedback(8.7e-4);
    c.bench_function("refine_degree_6", |b| {
        b.iter(|| refine_fixed_eps(&sys, black_box(&ctl), &[], &RefineOptions::default()).unwrap())
    });
}

fn simulation(c: &mut Criterion) {
    let (sys, ctl) = cylinder_with_feedback(8.7e-4);
    let cfg = SimConfig {
        horizon: 300.0,
        ..SimConfig::default()
    };
    let mut g = c.benchmark_group("simulation");
    g.sample_size(20);
    g.bench_function("rk4_horizon_300", |b| {
        b.iter(|| time_average(&sys, Some(black_box(&ctl)), &cfg).unwrap().phi_bar)
    });
    let fold = ctl.with_epsilon(0.0742);
    g.bench_function("equilibria_grid_9x9x9", |b| {
        b.iter(|| find_equilibria(&sys, Some(black_box(&fold)), &EquilibriumSearch::default()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bounds, synthesis, simulation);
criterion_main!(benches);
