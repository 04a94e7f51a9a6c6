//! Sequential small-feedback synthesis.
//!
//! With `V = sum eps^i V_i`, `u = sum_{i>=1} eps^i u_i` and `C = sum eps^i C_i`,
//! the bound residual `F = (f + g u) . grad V + phi(x, u) - C` expands as
//! `sum eps^i F_i`, where `F_i` is affine in the order-`i` unknowns once the
//! lower orders are fixed. Each step minimizes `C_i` subject to
//! `-F_i + sum_{j<i} S_j F_j` SOS, either with SOS multipliers (a certified
//! series) or free multipliers (larger improvements, asymptotic only).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bound::{
    auxiliary_basis, solve_bound, upper_bound, BoundCertificate, BoundError, BoundKind, BoundOptions,
    BoundProblem,
};
use crate::poly::{dot, Polynomial};
use crate::sdp::{SdpStatus, SolveOptions, SolveRecord};
use crate::sos::{DecisionPoly, KnownTerm, LinearExpr, MultiplierSign, SosError, SosProgram};
use crate::system::{PolySystem, SystemError};

pub const UNBOUNDED_DIAGNOSTIC: &str = "homogeneous objective escape; tighten rho";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthesisError {
    #[error("order {order}: {UNBOUNDED_DIAGNOSTIC} (rho = {rho:?})")]
    Unbounded { order: usize, rho: Option<f64> },
    #[error("order {order}: no certificate at these degrees ({status:?}); raise the degrees")]
    Infeasible { order: usize, status: SdpStatus },
    #[error("order {order}: solver stopped without a usable point ({status:?})")]
    SolverFailure { order: usize, status: SdpStatus },
    #[error("expected {expected} input polynomials for order {order}, got {got}")]
    InputCount { order: usize, expected: usize, got: usize },
    #[error("truncation order {requested} exceeds the {available} solved orders")]
    OrderUnavailable { requested: usize, available: usize },
    #[error("kappa must lie in (0, 1), got {0}")]
    Kappa(f64),
    #[error("epsilon must be finite and nonnegative, got {0}")]
    Epsilon(f64),
    #[error("rho must be positive, got {0}")]
    Rho(f64),
    #[error(transparent)]
    Bound(#[from] BoundError),
    #[error(transparent)]
    Sos(SosError),
    #[error(transparent)]
    System(#[from] SystemError),
}

fn sos_error(order: usize, rho: Option<f64>, e: SosError) -> SynthesisError {
    match e {
        SosError::Unusable(SdpStatus::Unbounded) => SynthesisError::Unbounded { order, rho },
        SosError::Unusable(status @ SdpStatus::Infeasible) => SynthesisError::Infeasible { order, status },
        SosError::Unusable(status) => SynthesisError::SolverFailure { order, status },
        e => SynthesisError::Sos(e),
    }
}

/// How a controller was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Every step used SOS multipliers.
    SosMultipliers,
    /// At least one step used free multipliers.
    FreeMultipliers,
    /// Bound recomputed for a fixed amplitude.
    FixedEpsilon,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::SosMultipliers => "A-I",
            Provenance::FreeMultipliers => "A-II",
            Provenance::FixedEpsilon => "O_eps",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepOptions {
    pub v_degree: u32,
    pub u_degree: u32,
    /// Degree of every multiplier `S_j`; the `u` degree when absent.
    pub multiplier_degree: Option<u32>,
    pub multiplier_sign: MultiplierSign,
    /// Box `|coefficient| <= rho` on every order-`i` decision except `C_i`.
    /// The step program is positively homogeneous, so without it any
    /// negative `C_i` escapes to minus infinity.
    pub rho: Option<f64>,
    pub solver: SolveOptions,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            v_degree: 2,
            u_degree: 2,
            multiplier_degree: None,
            multiplier_sign: MultiplierSign::Free,
            rho: Some(400.0),
            solver: SolveOptions::default(),
        }
    }
}

impl StepOptions {
    pub fn multiplier_degree(&self) -> u32 {
        self.multiplier_degree.unwrap_or(self.u_degree)
    }
}

/// One solved order of the expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub order: usize,
    pub c: f64,
    pub v: Polynomial,
    /// `u_i` per input; empty at order 0.
    pub u: Vec<Polynomial>,
    /// `S_j` by name, `j < order`.
    pub multipliers: BTreeMap<String, Polynomial>,
    pub multiplier_sign: Option<MultiplierSign>,
    /// Numeric `F_i` at the optimum.
    pub residual: Polynomial,
    pub recomposition_error: f64,
    pub options: StepOptions,
    pub solve: SolveRecord,
}

/// Solved orders `0..order()`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpansionState {
    steps: Vec<StepResult>,
}

impl ExpansionState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Next order to solve.
    pub fn order(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[StepResult] {
        &self.steps
    }

    pub fn c(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.c).collect()
    }

    pub fn residuals(&self) -> Vec<Polynomial> {
        self.steps.iter().map(|s| s.residual.clone()).collect()
    }

    /// SOS multipliers at every step with a multiplier.
    pub fn provenance(&self) -> Provenance {
        Provenance::from_steps(&self.steps)
    }

    /// Largest coefficient gap between each stored residual and a fresh
    /// evaluation of `F_j` from the stored pieces.
    pub fn residual_drift(&self, sys: &PolySystem) -> Result<f64, SynthesisError> {
        let mut worst: f64 = 0.0;
        for (j, s) in self.steps.iter().enumerate() {
            let unknowns = OrderTerms::numeric(&s.v, &s.u, s.c);
            let f = f_term_at(&self.steps[..j], sys, &unknowns)?.constant_part();
            worst = worst.max(f.max_coefficient_diff(&s.residual));
        }
        Ok(worst)
    }
}

/// Order-`i` unknowns, possibly carrying decisions.
#[derive(Debug, Clone)]
pub struct OrderTerms {
    pub v: DecisionPoly,
    pub u: Vec<DecisionPoly>,
    pub c: LinearExpr,
}

impl OrderTerms {
    pub fn numeric(v: &Polynomial, u: &[Polynomial], c: f64) -> Self {
        OrderTerms {
            v: DecisionPoly::from_poly(v),
            u: u.iter().map(DecisionPoly::from_poly).collect(),
            c: LinearExpr::constant(c),
        }
    }
}

/// `F_i` for `i = state.order()`, given the order-`i` unknowns.
pub fn f_term(
    state: &ExpansionState,
    sys: &PolySystem,
    unknowns: &OrderTerms,
) -> Result<DecisionPoly, SynthesisError> {
    f_term_at(state.steps(), sys, unknowns)
}

fn f_term_at(
    lower: &[StepResult],
    sys: &PolySystem,
    unknowns: &OrderTerms,
) -> Result<DecisionPoly, SynthesisError> {
    let i = lower.len();
    let n = sys.nstates();
    let m = sys.ninputs();
    let expected = if i == 0 { 0 } else { m };
    if unknowns.u.len() != expected {
        return Err(SynthesisError::InputCount {
            order: i,
            expected,
            got: unknowns.u.len(),
        });
    }

    let mut out = unknowns.v.lie_derivative(sys.drift());
    out.add_poly(&cost_coefficient(lower, sys, i)?, 1.0);
    out.add_scaled(&DecisionPoly::from_linear(n, &unknowns.c), -1.0);
    if i == 0 {
        return Ok(out);
    }

    // u_i enters through grad_u phi(x, 0) . u_i and g u_i . grad V_0
    let g = sys.input_matrix();
    let grad_v0 = lower[0].v.gradient();
    for (k, uk) in unknowns.u.iter().enumerate() {
        let dphi = sys.cost().derivative(n + k).truncate_vars(n);
        let column: Vec<Polynomial> = (0..n).map(|r| g.get(r, k).clone()).collect();
        let weight = &dphi + &dot(&column, &grad_v0);
        out.add_scaled(&uk.mul_poly(&weight), 1.0);
    }
    // g u_j . grad V_l with j + l = i, both fixed
    for j in 1..i {
        let gu = g.mul_vec(&lower[j].u);
        let cross = dot(&gu, &lower[i - j].v.gradient());
        out.add_poly(&cross, 1.0);
    }
    Ok(out)
}

/// `[eps^i] phi(x, sum_{1<=j<i} eps^j u_j)`.
fn cost_coefficient(lower: &[StepResult], sys: &PolySystem, i: usize) -> Result<Polynomial, SynthesisError> {
    let n = sys.nstates();
    let m = sys.ninputs();
    if i <= 1 || m == 0 {
        // lower inputs start at order 1, so they only reach eps^2 and up
        return Ok(if i == 0 { sys.state_cost() } else { Polynomial::zero(n) });
    }
    // eps is variable n of an extended space
    let states: Vec<usize> = (0..n).collect();
    let eps = Polynomial::var(n + 1, n);
    let mut images: Vec<Polynomial> = (0..n).map(|k| Polynomial::var(n + 1, k)).collect();
    for k in 0..m {
        let mut w = Polynomial::zero(n + 1);
        for (j, s) in lower.iter().enumerate().skip(1) {
            w = &w + &(&s.u[k].embed(n + 1, &states) * &eps.pow(j as u32));
        }
        images.push(w);
    }
    let series = sys.cost().compose(&images).map_err(SystemError::from)?;
    Ok(series.coefficient_of_power(n, i as u32).truncate_vars(n))
}

/// Solves the next order and appends it to `state`.
pub fn step<'a>(
    state: &'a mut ExpansionState,
    sys: &PolySystem,
    opts: &StepOptions,
) -> Result<&'a StepResult, SynthesisError> {
    let i = state.order();
    if let Some(r) = opts.rho {
        if !(r > 0.0) {
            return Err(SynthesisError::Rho(r));
        }
    }
    let result = if i == 0 {
        step_zero(sys, opts)?
    } else {
        step_higher(state, sys, opts)?
    };
    state.steps.push(result);
    Ok(state.steps.last().expect("just pushed"))
}

fn step_zero(sys: &PolySystem, opts: &StepOptions) -> Result<StepResult, SynthesisError> {
    let cert = upper_bound(
        sys,
        &BoundOptions {
            degree: opts.v_degree,
            ball: None,
            solver: opts.solver.clone(),
        },
    )?;
    let unknowns = OrderTerms::numeric(&cert.v, &[], cert.c);
    let residual = f_term_at(&[], sys, &unknowns)?.constant_part();
    Ok(StepResult {
        order: 0,
        c: cert.c,
        v: cert.v,
        u: Vec::new(),
        multipliers: BTreeMap::new(),
        multiplier_sign: None,
        residual,
        recomposition_error: cert.recomposition_error,
        options: opts.clone(),
        solve: cert.solve,
    })
}

/// Like [`step`] at order `i >= 1`, with `u_i` fixed to `feedback` so only
/// `V_i`, `C_i` and the multipliers are tuned.
pub fn step_with_feedback<'a>(
    state: &'a mut ExpansionState,
    sys: &PolySystem,
    opts: &StepOptions,
    feedback: &[Polynomial],
) -> Result<&'a StepResult, SynthesisError> {
    if state.order() == 0 {
        return step(state, sys, opts);
    }
    let result = solve_order(state, sys, opts, Some(feedback))?;
    state.steps.push(result);
    Ok(state.steps.last().expect("just pushed"))
}

fn step_higher(
    state: &ExpansionState,
    sys: &PolySystem,
    opts: &StepOptions,
) -> Result<StepResult, SynthesisError> {
    solve_order(state, sys, opts, None)
}

fn solve_order(
    state: &ExpansionState,
    sys: &PolySystem,
    opts: &StepOptions,
    feedback: Option<&[Polynomial]>,
) -> Result<StepResult, SynthesisError> {
    let i = state.order();
    let n = sys.nstates();
    let fail = |e: SosError| sos_error(i, opts.rho, e);

    let mut prog = SosProgram::new(n);
    let v_name = format!("V{i}");
    let c_name = format!("C{i}");
    let u_names: Vec<String> = (0..sys.ninputs()).map(|k| format!("u{i}_{k}")).collect();
    let v = prog
        .new_poly(&v_name, &auxiliary_basis(n, opts.v_degree))
        .map_err(fail)?;
    let u = match feedback {
        Some(fixed) => {
            if fixed.len() != sys.ninputs() {
                return Err(SynthesisError::InputCount {
                    order: i,
                    expected: sys.ninputs(),
                    got: fixed.len(),
                });
            }
            fixed.iter().map(DecisionPoly::from_poly).collect()
        }
        None => {
            let u_basis = auxiliary_basis(n, opts.u_degree);
            u_names
                .iter()
                .map(|name| prog.new_poly(name, &u_basis))
                .collect::<Result<Vec<_>, _>>()
                .map_err(fail)?
        }
    };
    let c = prog.new_scalar(&c_name).map_err(fail)?;

    let unknowns = OrderTerms {
        v,
        u,
        c: LinearExpr::var(c),
    };
    let f = f_term(state, sys, &unknowns)?;
    let known: Vec<KnownTerm> = state
        .steps()
        .iter()
        .map(|s| KnownTerm {
            name: format!("S{}", s.order),
            poly: s.residual.clone(),
            degree: opts.multiplier_degree(),
            sign: opts.multiplier_sign,
        })
        .collect();
    let body = prog.s_procedure_augment(&f.scaled(-1.0), &known).map_err(fail)?;
    prog.add_sos(&format!("step{i}"), body).map_err(fail)?;

    if let Some(rho) = opts.rho {
        let mut gauged: Vec<&str> = vec![v_name.as_str()];
        gauged.extend(u_names.iter().map(String::as_str));
        gauged.extend(known.iter().map(|k| k.name.as_str()));
        let ids: Vec<usize> = gauged
            .iter()
            .flat_map(|name| prog.poly_ids(name).unwrap_or(&[]).to_vec())
            .collect();
        for id in ids {
            prog.set_bounds(id, -rho, rho).map_err(fail)?;
        }
    }
    prog.minimize(LinearExpr::var(c)).map_err(fail)?;
    let sol = prog.solve(&opts.solver).map_err(fail)?;

    let v = sol.poly(&v_name).expect("V registered").clone();
    let u: Vec<Polynomial> = match feedback {
        Some(fixed) => fixed.to_vec(),
        None => u_names
            .iter()
            .map(|name| sol.poly(name).expect("u registered").clone())
            .collect(),
    };
    let c = sol.scalar(&c_name).expect("C registered");
    let multipliers = known
        .iter()
        .filter_map(|k| sol.poly(&k.name).map(|p| (k.name.clone(), p.clone())))
        .collect();
    let residual = f_term(state, sys, &OrderTerms::numeric(&v, &u, c))?.constant_part();
    Ok(StepResult {
        order: i,
        c,
        v,
        u,
        multipliers,
        multiplier_sign: Some(opts.multiplier_sign),
        residual,
        recomposition_error: sol.max_recomposition_error(),
        options: opts.clone(),
        solve: sol.record,
    })
}

/// Feedback `u(x) = sum_{i=1}^{k} eps^i u_i(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Controller {
    pub epsilon: f64,
    pub kappa: f64,
    pub provenance: Provenance,
    pub states: Vec<String>,
    pub inputs: Vec<String>,
    /// `terms[i - 1][k]` is `u_i` for input `k`.
    pub terms: Vec<Vec<Polynomial>>,
}

impl Controller {
    /// Controller with a single first-order term.
    pub fn first_order(sys: &PolySystem, u1: Vec<Polynomial>, epsilon: f64, kappa: f64) -> Self {
        Controller {
            epsilon,
            kappa,
            provenance: Provenance::FreeMultipliers,
            states: sys.states().to_vec(),
            inputs: sys.inputs().to_vec(),
            terms: vec![u1],
        }
    }

    pub fn order(&self) -> usize {
        self.terms.len()
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Controller {
            epsilon,
            ..self.clone()
        }
    }

    /// `u(x)` per input as polynomials in the states.
    pub fn feedback(&self) -> Vec<Polynomial> {
        let n = self.states.len();
        (0..self.inputs.len())
            .map(|k| {
                let mut acc = Polynomial::zero(n);
                for (i, order) in self.terms.iter().enumerate() {
                    acc = &acc + &order[k].scale(self.epsilon.powi(i as i32 + 1));
                }
                acc
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("controller serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundLabel {
    /// Truncated series of certified bounds.
    Series,
    /// First-order bound that holds only for small enough `eps`.
    UnverifiedAsymptotic,
}

impl fmt::Display for BoundLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundLabel::Series => "truncated series",
            BoundLabel::UnverifiedAsymptotic => "unverified (asymptotic)",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedBound {
    pub value: f64,
    pub label: BoundLabel,
    /// Orders summed.
    pub c: Vec<f64>,
    /// False when the first-order improvement is not negative, so the
    /// `kappa` form carries no claim.
    pub first_order_claim: bool,
    /// Truncated auxiliary function `sum eps^i V_i`.
    pub auxiliary: Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assembly {
    pub controller: Controller,
    pub bound: PredictedBound,
}

/// Builds the truncated controller and its predicted bound. With free
/// multipliers and `k = 1` the bound is `C_0 + eps kappa C_1`; otherwise it is
/// the series `sum eps^i C_i` (with `kappa` scaling the first-order term in
/// the free case).
pub fn assemble(
    state: &ExpansionState,
    sys: &PolySystem,
    epsilon: f64,
    kappa: f64,
    k: usize,
) -> Result<Assembly, SynthesisError> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(SynthesisError::Epsilon(epsilon));
    }
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(SynthesisError::Kappa(kappa));
    }
    if k + 1 > state.order() {
        return Err(SynthesisError::OrderUnavailable {
            requested: k,
            available: state.order().saturating_sub(1),
        });
    }
    let steps = &state.steps()[..=k];
    let provenance = Provenance::from_steps(steps);
    let c: Vec<f64> = steps.iter().map(|s| s.c).collect();
    let (label, weight1) = match provenance {
        Provenance::FreeMultipliers => (BoundLabel::UnverifiedAsymptotic, kappa),
        _ => (BoundLabel::Series, 1.0),
    };
    let mut value = 0.0;
    for (i, &ci) in c.iter().enumerate() {
        let w = if i == 1 { weight1 } else { 1.0 };
        value += w * epsilon.powi(i as i32) * ci;
    }
    let first_order_claim = c.get(1).is_some_and(|&c1| c1 < 0.0);
    let mut auxiliary = Polynomial::zero(sys.nstates());
    for (i, s) in steps.iter().enumerate() {
        auxiliary = &auxiliary + &s.v.scale(epsilon.powi(i as i32));
    }
    let controller = Controller {
        epsilon,
        kappa,
        provenance,
        states: sys.states().to_vec(),
        inputs: sys.inputs().to_vec(),
        terms: steps[1..].iter().map(|s| s.u.clone()).collect(),
    };
    Ok(Assembly {
        controller,
        bound: PredictedBound {
            value,
            label,
            c,
            first_order_claim,
            auxiliary,
        },
    })
}

impl Provenance {
    fn from_steps(steps: &[StepResult]) -> Self {
        if steps
            .iter()
            .any(|s| s.multiplier_sign == Some(MultiplierSign::Free))
        {
            Provenance::FreeMultipliers
        } else {
            Provenance::SosMultipliers
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineOptions {
    pub v_degree: u32,
    /// Add `S_j F_j` with SOS `S_j` for each supplied residual.
    pub relax: bool,
    pub multiplier_degree: u32,
    pub solver: SolveOptions,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            v_degree: 6,
            relax: false,
            multiplier_degree: 2,
            solver: SolveOptions::default(),
        }
    }
}

/// Bound for the closed loop `f + g u(x)` with cost `phi(x, u(x))` at the
/// controller's fixed `eps`. `residuals` are the known `F_j` used when
/// relaxing.
pub fn refine_fixed_eps(
    sys: &PolySystem,
    controller: &Controller,
    residuals: &[Polynomial],
    opts: &RefineOptions,
) -> Result<BoundCertificate, SynthesisError> {
    let u = controller.feedback();
    let field = sys.closed_loop(&u)?;
    let cost = sys.cost_with(&u)?;
    let known = if opts.relax {
        residuals
            .iter()
            .enumerate()
            .map(|(j, r)| KnownTerm {
                name: format!("S{j}"),
                poly: r.clone(),
                degree: opts.multiplier_degree,
                sign: MultiplierSign::Sos,
            })
            .collect()
    } else {
        Vec::new()
    };
    let problem = BoundProblem {
        field: &field,
        cost: &cost,
        kind: BoundKind::Upper,
        known,
        tag: format!(
            "refine_fixed_eps(eps = {}, relax = {})",
            controller.epsilon, opts.relax
        ),
    };
    Ok(solve_bound(&problem, opts.v_degree, &opts.solver)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{parse_poly, PolyMat};
    use nalgebra::{DMatrix, DVector};

    /// Scalar plant with a cost that is not quadratic in `u`, so every
    /// branch of the expansion is exercised.
    fn plant() -> PolySystem {
        let x = ["x", "y"];
        let xu = ["x", "y", "u"];
        PolySystem::new(
            vec!["x".into(), "y".into()],
            vec!["u".into()],
            vec![parse_poly("y - x^3", &x).unwrap(), parse_poly("-x - y + x*y", &x).unwrap()],
            PolyMat::from_rows(vec![
                vec![parse_poly("1 + y", &x).unwrap()],
                vec![parse_poly("x", &x).unwrap()],
            ])
            .unwrap(),
            parse_poly("x^2 + y^2 + x*u + u^2 + y*u^3", &xu).unwrap(),
        )
        .unwrap()
    }

    fn fake_step(order: usize, v: &str, u: &[&str], c: f64) -> StepResult {
        let x = ["x", "y"];
        StepResult {
            order,
            c,
            v: parse_poly(v, &x).unwrap(),
            u: u.iter().map(|s| parse_poly(s, &x).unwrap()).collect(),
            multipliers: BTreeMap::new(),
            multiplier_sign: Some(MultiplierSign::Sos),
            residual: Polynomial::zero(2),
            recomposition_error: 0.0,
            options: StepOptions::default(),
            solve: SolveRecord {
                status: SdpStatus::Optimal,
                objective: 0.0,
                dual_objective: 0.0,
                residuals: crate::sdp::Residuals {
                    primal: 0.0,
                    dual: 0.0,
                    gap: 0.0,
                },
                iterations: 0,
            },
        }
    }

    #[test]
    fn expansion_matches_interpolated_series() {
        let sys = plant();
        let steps = vec![
            fake_step(0, "x^2 + 2*y^2 - x*y", &[], 1.5),
            fake_step(1, "x - y^2", &["2*x - y"], -0.7),
            fake_step(2, "x*y + 3*y", &["x*y - 1"], 0.2),
            fake_step(3, "y^2", &["x + y^2"], 0.05),
        ];
        let point = [0.4, -1.3];
        // F(eps) at a fixed point is a polynomial in eps of degree <= 9
        // (u^3 times y with u of order eps^3); interpolate its coefficients
        let nodes: Vec<f64> = (0..10).map(|k| -0.9 + 0.2 * k as f64).collect();
        let full = |eps: f64| {
            let mut v = Polynomial::zero(2);
            let mut c = 0.0;
            let mut u = Polynomial::zero(2);
            for s in &steps {
                let w = eps.powi(s.order as i32);
                v = &v + &s.v.scale(w);
                c += w * s.c;
                if let Some(ui) = s.u.first() {
                    u = &u + &ui.scale(w);
                }
            }
            let field = sys.closed_loop(&[u.clone()]).unwrap();
            let cost = sys.cost_with(&[u]).unwrap();
            (&dot(&field, &v.gradient()) + &cost).evaluate(&point).unwrap() - c
        };
        let vand = DMatrix::from_fn(nodes.len(), nodes.len(), |r, c| nodes[r].powi(c as i32));
        let rhs = DVector::from_iterator(nodes.len(), nodes.iter().map(|&e| full(e)));
        let coeffs = vand.lu().solve(&rhs).unwrap();
        for i in 0..steps.len() {
            let s = &steps[i];
            let f = f_term_at(&steps[..i], &sys, &OrderTerms::numeric(&s.v, &s.u, s.c))
                .unwrap()
                .constant_part();
            let got = f.evaluate(&point).unwrap();
            assert!((got - coeffs[i]).abs() < 1e-8, "order {i}: {got} vs {}", coeffs[i]);
        }
    }

    #[test]
    fn quadratic_cost_reproduces_the_displayed_terms() {
        // phi = phi_0 + u^2
        let x = ["x", "y"];
        let sys = PolySystem::new(
            vec!["x".into(), "y".into()],
            vec!["u".into()],
            plant().drift().to_vec(),
            plant().input_matrix().clone(),
            parse_poly("x^2 + y^2 + u^2", &["x", "y", "u"]).unwrap(),
        )
        .unwrap();
        let steps = [
            fake_step(0, "x^2 + y^2", &[], 1.0),
            fake_step(1, "x*y", &["x - y"], -2.0),
            fake_step(2, "y^2 + x", &["x^2"], 0.5),
        ];
        let g = sys.input_matrix();
        let lie = |v: &Polynomial| dot(sys.drift(), &v.gradient());
        let gu = |u: &Polynomial, v: &Polynomial| dot(&g.mul_vec(std::slice::from_ref(u)), &v.gradient());
        let phi0 = parse_poly("x^2 + y^2", &x).unwrap();
        let c = |k: f64| Polynomial::constant(2, k);
        let (v0, v1, v2) = (&steps[0].v, &steps[1].v, &steps[2].v);
        let (u1, u2) = (&steps[1].u[0], &steps[2].u[0]);
        let expect = [
            &(&lie(v0) + &phi0) - &c(1.0),
            &(&lie(v1) + &gu(u1, v0)) - &c(-2.0),
            &(&(&(&lie(v2) + &gu(u1, v1)) + &gu(u2, v0)) + &(u1 * u1)) - &c(0.5),
        ];
        for i in 0..3 {
            let s = &steps[i];
            let f = f_term_at(&steps[..i], &sys, &OrderTerms::numeric(&s.v, &s.u, s.c))
                .unwrap()
                .constant_part();
            assert!(f.max_coefficient_diff(&expect[i]) < 1e-12, "order {i}");
        }
    }

    #[test]
    fn order_terms_are_affine_in_decisions() {
        let sys = plant();
        let state = ExpansionState {
            steps: vec![fake_step(0, "x^2 + y^2", &[], 1.0), fake_step(1, "x", &["y"], -1.0)],
        };
        let mut prog = SosProgram::new(2);
        let v = prog.new_poly("V", &auxiliary_basis(2, 2)).unwrap();
        let u = prog.new_poly("u", &auxiliary_basis(2, 2)).unwrap();
        let c = prog.new_scalar("C").unwrap();
        let f = f_term(
            &state,
            &sys,
            &OrderTerms {
                v,
                u: vec![u],
                c: LinearExpr::var(c),
            },
        )
        .unwrap();
        // linear interpolation between two decision vectors is exact
        let a: Vec<f64> = (0..prog.num_decisions()).map(|k| (k as f64).sin()).collect();
        let b: Vec<f64> = (0..prog.num_decisions()).map(|k| (k as f64 * 0.3).cos()).collect();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(p, q)| 0.5 * (p + q)).collect();
        let avg = &f.evaluate(&a).scale(0.5) + &f.evaluate(&b).scale(0.5);
        assert!(f.evaluate(&mid).max_coefficient_diff(&avg) < 1e-12);
    }

    #[test]
    fn wrong_input_count_is_rejected() {
        let sys = plant();
        let state = ExpansionState {
            steps: vec![fake_step(0, "x^2", &[], 1.0)],
        };
        let err = f_term(&state, &sys, &OrderTerms::numeric(&Polynomial::zero(2), &[], 0.0));
        assert!(matches!(err, Err(SynthesisError::InputCount { .. })));
    }

    #[test]
    fn assemble_arithmetic_and_zero_amplitude() {
        let sys = plant();
        let mut s1 = fake_step(1, "x", &["y"], -354.0);
        s1.multiplier_sign = Some(MultiplierSign::Free);
        let state = ExpansionState {
            steps: vec![fake_step(0, "x^2", &[], 6.59), s1],
        };
        let a = assemble(&state, &sys, 8.7e-4, 0.5, 1).unwrap();
        assert!((a.bound.value - (6.59 - 8.7e-4 * 0.5 * 354.0)).abs() < 1e-12);
        assert_eq!(a.bound.label, BoundLabel::UnverifiedAsymptotic);
        assert!(a.bound.first_order_claim);
        let zero = assemble(&state, &sys, 0.0, 0.5, 1).unwrap();
        assert!(zero.controller.feedback()[0].is_zero());
        assert_eq!(zero.bound.value, 6.59);
        assert!(assemble(&state, &sys, 1e-3, 1.0, 1).is_err());
        assert!(assemble(&state, &sys, 1e-3, 0.5, 2).is_err());
    }

    #[test]
    fn controller_json_round_trips() {
        let sys = plant();
        let c = Controller::first_order(&sys, vec![parse_poly("3*x - y*x", &["x", "y"]).unwrap()], 0.01, 0.5);
        let back = Controller::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let u = back.feedback();
        assert!((u[0].evaluate(&[1.0, 2.0]).unwrap() - 0.01).abs() < 1e-15);
    }
}
