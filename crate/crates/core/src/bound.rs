//! Upper and lower bounds on long-time averages from polynomial auxiliary
//! functions, and the global-attractor check.
//!
//! For any `V`, the average of `H = f . grad V + phi` along a bounded
//! trajectory equals the average of `phi`. So `C - H` SOS gives an upper
//! bound `C` and `H - C` SOS a lower bound.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{dot, monomial_basis, Monomial, Polynomial};
use crate::sdp::{SdpStatus, SolveOptions, SolveRecord};
use crate::sos::{DecisionPoly, KnownTerm, LinearExpr, MultiplierSign, SosError, SosProgram};
use crate::system::{PolySystem, SystemError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundError {
    #[error("no certificate exists at this degree (solver reported {0:?})")]
    Infeasible(SdpStatus),
    #[error("bound problem is unbounded; check that the cost is bounded below")]
    Unbounded,
    #[error("solver stopped without a usable point ({0:?})")]
    SolverFailure(SdpStatus),
    #[error("degree {0} is too low for an auxiliary function")]
    DegreeTooLow(u32),
    #[error(transparent)]
    Sos(SosError),
    #[error(transparent)]
    System(#[from] SystemError),
}

impl From<SosError> for BoundError {
    fn from(e: SosError) -> Self {
        match e {
            SosError::Unusable(SdpStatus::Infeasible) => BoundError::Infeasible(SdpStatus::Infeasible),
            SosError::Unusable(SdpStatus::Unbounded) => BoundError::Unbounded,
            SosError::Unusable(s) => BoundError::SolverFailure(s),
            e => BoundError::Sos(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Upper,
    Lower,
}

/// Restrict the bound to the ball `|x|^2 / 2 <= beta` through an SOS
/// multiplier of the given degree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallRestriction {
    pub beta: f64,
    pub multiplier_degree: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundOptions {
    /// Degree of the auxiliary function `V`.
    pub degree: u32,
    pub ball: Option<BallRestriction>,
    pub solver: SolveOptions,
}

impl Default for BoundOptions {
    fn default() -> Self {
        BoundOptions {
            degree: 2,
            ball: None,
            solver: SolveOptions::default(),
        }
    }
}

impl BoundOptions {
    pub fn with_degree(degree: u32) -> Self {
        BoundOptions {
            degree,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCertificate {
    pub kind: BoundKind,
    /// Bound value.
    pub c: f64,
    /// Auxiliary function.
    pub v: Polynomial,
    pub degree: u32,
    /// Multipliers of any S-procedure terms, by name.
    pub multipliers: BTreeMap<String, Polynomial>,
    /// SOS factors of the main constraint body.
    pub factors: Vec<Polynomial>,
    pub recomposition_error: f64,
    pub solve: SolveRecord,
    pub problem: String,
}

impl BoundCertificate {
    /// `H(x) = f . grad V + phi` for a numeric field and cost.
    pub fn h_poly(&self, field: &[Polynomial], cost: &Polynomial) -> Polynomial {
        &dot(field, &self.v.gradient()) + cost
    }
}

/// Auxiliary function ansatz: every monomial of degree `1..=degree`.
pub fn auxiliary_basis(nvars: usize, degree: u32) -> Vec<Monomial> {
    monomial_basis(nvars, degree)
        .into_iter()
        .filter(|m| !m.is_one())
        .collect()
}

/// General bound problem on a fixed closed-loop field and cost, with optional
/// S-procedure terms added to the SOS body.
#[derive(Debug, Clone)]
pub struct BoundProblem<'a> {
    pub field: &'a [Polynomial],
    pub cost: &'a Polynomial,
    pub kind: BoundKind,
    pub known: Vec<KnownTerm>,
    pub tag: String,
}

/// Builds the SOS program behind [`solve_bound`] without solving it.
pub fn bound_program(problem: &BoundProblem<'_>, degree: u32) -> Result<SosProgram, BoundError> {
    if degree == 0 {
        return Err(BoundError::DegreeTooLow(degree));
    }
    let n = problem.cost.nvars();
    let mut prog = SosProgram::new(n);
    let v = prog.new_poly("V", &auxiliary_basis(n, degree))?;
    let c = prog.new_scalar("C")?;
    // H - C
    let mut h = v.lie_derivative(problem.field);
    h.add_poly(problem.cost, 1.0);
    h.add_scaled(&DecisionPoly::scalar(n, c), -1.0);
    let body = match problem.kind {
        BoundKind::Upper => h.scaled(-1.0),
        BoundKind::Lower => h,
    };
    let body = prog.s_procedure_augment(&body, &problem.known)?;
    prog.add_sos("bound", body)?;
    prog.minimize(match problem.kind {
        BoundKind::Upper => LinearExpr::var(c),
        BoundKind::Lower => LinearExpr::term(c, -1.0),
    })?;
    Ok(prog)
}

pub fn solve_bound(
    problem: &BoundProblem<'_>,
    degree: u32,
    solver: &SolveOptions,
) -> Result<BoundCertificate, BoundError> {
    let sol = bound_program(problem, degree)?.solve(solver)?;
    let main = sol
        .decompositions
        .iter()
        .find(|d| d.constraint == "bound")
        .expect("bound constraint is compiled");
    let multipliers = problem
        .known
        .iter()
        .filter_map(|k| sol.poly(&k.name).map(|p| (k.name.clone(), p.clone())))
        .collect();
    Ok(BoundCertificate {
        kind: problem.kind,
        c: sol.scalar("C").expect("C is registered"),
        v: sol.poly("V").expect("V is registered").clone(),
        degree,
        multipliers,
        factors: main.factors.clone(),
        recomposition_error: sol.max_recomposition_error(),
        solve: sol.record,
        problem: problem.tag.clone(),
    })
}

fn ball_terms(n: usize, ball: Option<BallRestriction>) -> Vec<KnownTerm> {
    ball.map(|b| {
        let e = energy(n);
        KnownTerm {
            name: "S_ball".into(),
            poly: &e - &Polynomial::constant(n, b.beta),
            degree: b.multiplier_degree,
            sign: MultiplierSign::Sos,
        }
    })
    .into_iter()
    .collect()
}

/// `|x|^2 / 2`
pub fn energy(n: usize) -> Polynomial {
    let mut e = Polynomial::zero(n);
    for i in 0..n {
        e.add_term(Monomial::var(n, i).squared(), 0.5);
    }
    e
}

fn system_problem<'a>(
    sys: &'a PolySystem,
    cost: &'a Polynomial,
    kind: BoundKind,
    opts: &BoundOptions,
) -> BoundProblem<'a> {
    BoundProblem {
        field: sys.drift(),
        cost,
        kind,
        known: ball_terms(sys.nstates(), opts.ball),
        tag: match kind {
            BoundKind::Upper => "upper_bound".into(),
            BoundKind::Lower => "lower_bound".into(),
        },
    }
}

fn bound(sys: &PolySystem, kind: BoundKind, opts: &BoundOptions) -> Result<BoundCertificate, BoundError> {
    let cost = sys.state_cost();
    solve_bound(&system_problem(sys, &cost, kind, opts), opts.degree, &opts.solver)
}

/// The unsolved program of [`upper_bound`] or [`lower_bound`], e.g. for export.
pub fn system_bound_program(
    sys: &PolySystem,
    kind: BoundKind,
    opts: &BoundOptions,
) -> Result<SosProgram, BoundError> {
    let cost = sys.state_cost();
    bound_program(&system_problem(sys, &cost, kind, opts), opts.degree)
}

/// Smallest `C` such that `C - f . grad V - phi` is SOS for some `V` of the
/// given degree. Inputs are set to zero.
pub fn upper_bound(sys: &PolySystem, opts: &BoundOptions) -> Result<BoundCertificate, BoundError> {
    bound(sys, BoundKind::Upper, opts)
}

/// Largest `C` such that `f . grad V + phi - C` is SOS.
pub fn lower_bound(sys: &PolySystem, opts: &BoundOptions) -> Result<BoundCertificate, BoundError> {
    bound(sys, BoundKind::Lower, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttractorCertificate {
    pub feasible: bool,
    pub beta: f64,
    pub multiplier_degree: u32,
    /// Multiplier `S`; present when feasible.
    pub s: Option<Polynomial>,
    pub status: SdpStatus,
}

/// Checks that `x . f(x) <= 0` whenever `|x|^2 / 2 >= beta`, through
/// `-(x . f + S (|x|^2 / 2 - beta))` SOS with `S` SOS of degree
/// `multiplier_degree`.
pub fn attractor_certificate(
    sys: &PolySystem,
    beta: f64,
    multiplier_degree: u32,
    solver: &SolveOptions,
) -> Result<AttractorCertificate, BoundError> {
    let n = sys.nstates();
    let x: Vec<Polynomial> = (0..n).map(|i| Polynomial::var(n, i)).collect();
    let xf = dot(&x, sys.drift());
    let mut prog = SosProgram::new(n);
    let body = DecisionPoly::from_poly(&(-&xf));
    let body = prog.s_procedure_augment(
        &body,
        &[KnownTerm {
            name: "S".into(),
            poly: &(-&energy(n)) + &Polynomial::constant(n, beta),
            degree: multiplier_degree,
            sign: MultiplierSign::Sos,
        }],
    )?;
    prog.add_sos("attractor", body)?;
    let out = |feasible, s, status| AttractorCertificate {
        feasible,
        beta,
        multiplier_degree,
        s,
        status,
    };
    match prog.solve(solver) {
        Ok(sol) => Ok(out(true, sol.poly("S").cloned(), sol.status)),
        Err(SosError::Unusable(status @ (SdpStatus::Infeasible | SdpStatus::Unbounded))) => {
            Ok(out(false, None, status))
        }
        Err(SosError::Unusable(status)) => Err(BoundError::SolverFailure(status)),
        // An SOS body with an odd leading degree cannot be matched by any
        // Gram matrix of the padded size; that is still "no certificate".
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::{parse_poly, PolyMat};

    fn decay() -> PolySystem {
        PolySystem::new(
            vec!["x".into()],
            vec![],
            vec![parse_poly("-x", &["x"]).unwrap()],
            PolyMat::zeros(1, 0, 1),
            parse_poly("x^2", &["x"]).unwrap(),
        )
        .unwrap()
    }

    fn growth() -> PolySystem {
        PolySystem::new(
            vec!["x".into()],
            vec![],
            vec![parse_poly("x", &["x"]).unwrap()],
            PolyMat::zeros(1, 0, 1),
            parse_poly("x^2", &["x"]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn linear_decay_bounds_are_zero() {
        let up = upper_bound(&decay(), &BoundOptions::default()).unwrap();
        assert!(up.c.abs() < 1e-6, "{}", up.c);
        // any V = k x^2 with k >= 1/2 certifies C = 0; H must stay <= 0
        let k = up.v.coefficient(&Monomial::new(vec![2]));
        assert!(k >= 0.5 - 1e-6, "{k}");
        assert!(up.recomposition_error < 1e-6);
        let lo = lower_bound(&decay(), &BoundOptions::default()).unwrap();
        assert!(lo.c.abs() < 1e-6, "{}", lo.c);
    }

    #[test]
    fn attractor_checks() {
        let opts = SolveOptions::default();
        let stable = attractor_certificate(&decay(), 1.0, 0, &opts).unwrap();
        assert!(stable.feasible);
        let s = stable.s.unwrap().coefficient(&Monomial::one(1));
        // (1 - s/2) x^2 + s is SOS iff 0 <= s <= 2
        assert!((-1e-7..=2.0 + 1e-7).contains(&s), "{s}");
        for d in [0, 2, 4] {
            let unstable = attractor_certificate(&growth(), 1.0, d, &opts).unwrap();
            assert!(!unstable.feasible, "degree {d}");
        }
    }

    #[test]
    fn ball_restriction_only_loosens_the_problem() {
        let opts = BoundOptions {
            ball: Some(BallRestriction {
                beta: 10.0,
                multiplier_degree: 0,
            }),
            ..Default::default()
        };
        let up = upper_bound(&decay(), &opts).unwrap();
        assert!(up.c <= 1e-6);
        assert!(up.multipliers.contains_key("S_ball"));
    }
}
