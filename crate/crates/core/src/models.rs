//! Built-in reference systems.

use std::collections::BTreeMap;

use crate::poly::{parse_poly_with, ParseContext, PolyMat, Polynomial};
use crate::system::PolySystem;

pub const SIGMA_R: f64 = 0.05439;
pub const SIGMA_3: f64 = 0.05347;
pub const ALPHA: f64 = 0.02095;
pub const BETA: f64 = 0.02116;
pub const GAMMA: f64 = -0.03504;
pub const OMEGA: f64 = 0.9232;
pub const G1: f64 = -0.15402;
pub const G2: f64 = 0.046387;

/// Three-mode Galerkin model of the wake behind a circular cylinder at
/// Re = 100 (two oscillating modes plus a shift mode), actuated by one
/// volume-force input, with cost `|a|^2 / 2 + u^2`.
pub fn cylinder() -> PolySystem {
    let params: BTreeMap<String, f64> = [
        ("sr", SIGMA_R),
        ("s3", SIGMA_3),
        ("al", ALPHA),
        ("be", BETA),
        ("ga", GAMMA),
        ("om", OMEGA),
        ("g1", G1),
        ("g2", G2),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let states = ["a1", "a2", "a3"];
    let ctx = ParseContext::new(&states).with_parameters(params.clone());
    let p = |s: &str| parse_poly_with(s, &ctx).expect("built-in model parses");
    let f = vec![
        p("sr*a1 - (om + ga*a3)*a2 - be*a1*a3"),
        p("(om + ga*a3)*a1 + sr*a2 - be*a2*a3"),
        p("al*a1^2 + al*a2^2 - s3*a3"),
    ];
    let g = PolyMat::from_rows(vec![vec![p("g1")], vec![p("g2")], vec![Polynomial::zero(3)]])
        .expect("built-in model is rectangular");
    let ctx_u = ParseContext::new(&["a1", "a2", "a3", "u"]);
    let cost = parse_poly_with("0.5*(a1^2 + a2^2 + a3^2) + u^2", &ctx_u).expect("cost parses");
    PolySystem::new(
        states.iter().map(|s| s.to_string()).collect(),
        vec!["u".to_string()],
        f,
        g,
        cost,
    )
    .expect("built-in model is consistent")
}

/// Published degree-2 first-order feedback term for [`cylinder`].
pub fn cylinder_reference_u1() -> Polynomial {
    parse_poly_with(
        "45.37*a1 - 28.47*a2 - 142.76*a2*a3 + 399.49*a1*a3",
        &ParseContext::new(&["a1", "a2", "a3"]),
    )
    .expect("reference feedback parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cylinder_field_matches_matrix_form() {
        let sys = cylinder();
        let a = [0.7, -1.3, 2.1];
        let mut out = [0.0; 3];
        sys.field_into(&a, &[0.5], &mut out);
        let w = OMEGA + GAMMA * a[2];
        let expect = [
            SIGMA_R * a[0] - w * a[1] - BETA * a[0] * a[2] + G1 * 0.5,
            w * a[0] + SIGMA_R * a[1] - BETA * a[1] * a[2] + G2 * 0.5,
            ALPHA * (a[0] * a[0] + a[1] * a[1]) - SIGMA_3 * a[2],
        ];
        for i in 0..3 {
            assert!((out[i] - expect[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn cost_spot_value() {
        let sys = cylinder();
        let a = [0.6988, 2.362, 2.377];
        let u = -12.87;
        let v = sys.cost_at(&a, &[u]);
        let direct = 0.5 * (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]) + u * u;
        assert!((v - direct).abs() < 1e-12);
        assert!((v - 171.55).abs() / 171.55 < 1e-3, "{v}");
    }
}
