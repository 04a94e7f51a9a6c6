//! Benchmarks for the solver, synthesis and simulation paths; see
//! `benches/pipeline.rs`.

use avgbound::models::{cylinder, cylinder_reference_u1};
use avgbound::synthesis::Controller;
use avgbound::PolySystem;

/// Cylinder model with the published first-order feedback at `eps`.
pub fn cylinder_with_feedback(eps: f64) -> (PolySystem, Controller) {
    let sys = cylinder();
    let ctl = Controller::first_order(&sys, vec![cylinder_reference_u1()], eps, 0.5);
    (sys, ctl)
}
