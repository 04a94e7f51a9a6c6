//! Sum-of-squares programs over affine decision polynomials, compiled to
//! block SDPs through Gram matrices.

mod expr;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::sym_eigen;
use crate::poly::{monomial_basis, Monomial, Polynomial};
use crate::sdp::{
    solve, BlockKind, Equality, SdpError, SdpProblem, SdpSolution, SdpStatus, SolveOptions,
    SolveRecord, SymSparse,
};

pub use expr::{DecisionId, DecisionPoly, LinearExpr};

/// Gram eigenvalues below this are treated as zero when factoring.
pub const EIGEN_CLIP: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SosError {
    #[error("Gram degree must be even, got {0}")]
    OddDegree(u32),
    #[error("constraint '{name}' has degree {degree}, above twice the Gram basis degree {half}")]
    DegreeOverflow { name: String, degree: u32, half: u32 },
    #[error("decision variable {0} is not registered")]
    UnknownDecision(DecisionId),
    #[error("decision name '{0}' is already used")]
    DuplicateName(String),
    #[error("polynomial has {got} variables, program has {expected}")]
    NvarsMismatch { expected: usize, got: usize },
    #[error("constraint '{name}' requires {value} = 0 for a monomial with no free coefficient")]
    StructurallyInfeasible { name: String, value: f64 },
    #[error("solver status {0:?} has no usable solution")]
    Unusable(SdpStatus),
    #[error(transparent)]
    Sdp(#[from] SdpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Sos,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub name: String,
    pub kind: ConstraintKind,
    pub body: DecisionPoly,
    /// Gram basis degree override; `None` uses half the padded body degree.
    pub half_degree: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionVar {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

/// A named polynomial whose coefficients are decision variables.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedPoly {
    pub name: String,
    pub basis: Vec<Monomial>,
    pub ids: Vec<DecisionId>,
}

/// Monomial basis `z` of a Gram form `z' Q z`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramBlock {
    pub basis: Vec<Monomial>,
}

impl GramBlock {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn half_degree(&self) -> u32 {
        self.basis.iter().map(Monomial::degree).max().unwrap_or(0)
    }

    /// For every monomial of `z z'`, the upper-triangle index pairs producing it.
    pub fn products(&self) -> BTreeMap<Monomial, Vec<(usize, usize)>> {
        let mut out: BTreeMap<Monomial, Vec<(usize, usize)>> = BTreeMap::new();
        for i in 0..self.basis.len() {
            for j in i..self.basis.len() {
                out.entry(self.basis[i].mul(&self.basis[j]))
                    .or_default()
                    .push((i, j));
            }
        }
        out
    }

    /// `z' Q z` for a numeric `Q`.
    pub fn expand(&self, q: &DMatrix<f64>) -> Polynomial {
        let nvars = self.basis.first().map_or(0, Monomial::nvars);
        let mut p = Polynomial::zero(nvars);
        for (m, pairs) in self.products() {
            let c: f64 = pairs
                .iter()
                .map(|&(i, j)| if i == j { q[(i, i)] } else { q[(i, j)] + q[(j, i)] })
                .sum();
            p.add_term(m, c);
        }
        p
    }
}

/// Full monomial basis of degree `degree / 2` for a Gram form of even
/// degree `degree`.
pub fn gram_parameterize(nvars: usize, degree: u32) -> Result<GramBlock, SosError> {
    if !degree.is_multiple_of(2) {
        return Err(SosError::OddDegree(degree));
    }
    Ok(GramBlock {
        basis: monomial_basis(nvars, degree / 2),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierSign {
    /// Multiplier constrained to be SOS (own Gram block).
    Sos,
    /// Unconstrained coefficients.
    Free,
}

/// A known polynomial to be added to a body with a fresh multiplier.
#[derive(Debug, Clone)]
pub struct KnownTerm {
    pub name: String,
    pub poly: Polynomial,
    pub degree: u32,
    pub sign: MultiplierSign,
}

#[derive(Debug, Clone, Default)]
pub struct SosProgram {
    nvars: usize,
    vars: Vec<DecisionVar>,
    polys: Vec<NamedPoly>,
    constraints: Vec<Constraint>,
    objective: LinearExpr,
}

impl SosProgram {
    pub fn new(nvars: usize) -> Self {
        SosProgram {
            nvars,
            ..Default::default()
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn num_decisions(&self) -> usize {
        self.vars.len()
    }

    pub fn decisions(&self) -> &[DecisionVar] {
        &self.vars
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn named_polys(&self) -> &[NamedPoly] {
        &self.polys
    }

    pub fn objective(&self) -> &LinearExpr {
        &self.objective
    }

    fn check_name(&self, name: &str) -> Result<(), SosError> {
        if self.polys.iter().any(|p| p.name == name) {
            return Err(SosError::DuplicateName(name.to_string()));
        }
        Ok(())
    }

    fn push_var(&mut self, name: String) -> DecisionId {
        self.vars.push(DecisionVar {
            name,
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        });
        self.vars.len() - 1
    }

    /// A scalar decision, recorded as a degree-0 named polynomial.
    pub fn new_scalar(&mut self, name: &str) -> Result<DecisionId, SosError> {
        self.check_name(name)?;
        let id = self.push_var(name.to_string());
        self.polys.push(NamedPoly {
            name: name.to_string(),
            basis: vec![Monomial::one(self.nvars)],
            ids: vec![id],
        });
        Ok(id)
    }

    /// A polynomial with one free coefficient per basis monomial.
    pub fn new_poly(&mut self, name: &str, basis: &[Monomial]) -> Result<DecisionPoly, SosError> {
        self.check_name(name)?;
        for m in basis {
            if m.nvars() != self.nvars {
                return Err(SosError::NvarsMismatch {
                    expected: self.nvars,
                    got: m.nvars(),
                });
            }
        }
        let ids: Vec<DecisionId> = basis
            .iter()
            .enumerate()
            .map(|(k, _)| self.push_var(format!("{name}[{k}]")))
            .collect();
        let p = DecisionPoly::from_basis(self.nvars, basis, &ids);
        self.polys.push(NamedPoly {
            name: name.to_string(),
            basis: basis.to_vec(),
            ids,
        });
        Ok(p)
    }

    /// A polynomial of degree `degree` constrained to be SOS.
    pub fn new_sos_poly(&mut self, name: &str, degree: u32) -> Result<DecisionPoly, SosError> {
        let p = self.new_poly(name, &monomial_basis(self.nvars, degree))?;
        self.add_sos(name, p.clone())?;
        Ok(p)
    }

    pub fn poly_ids(&self, name: &str) -> Option<&[DecisionId]> {
        self.polys
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.ids.as_slice())
    }

    pub fn set_bounds(&mut self, id: DecisionId, lo: f64, hi: f64) -> Result<(), SosError> {
        let v = self.vars.get_mut(id).ok_or(SosError::UnknownDecision(id))?;
        v.lo = lo;
        v.hi = hi;
        Ok(())
    }

    fn check_body(&self, body: &DecisionPoly) -> Result<(), SosError> {
        if body.nvars() != self.nvars {
            return Err(SosError::NvarsMismatch {
                expected: self.nvars,
                got: body.nvars(),
            });
        }
        if let Some(&id) = body.decisions().iter().find(|&&id| id >= self.vars.len()) {
            return Err(SosError::UnknownDecision(id));
        }
        Ok(())
    }

    pub fn add_sos(&mut self, name: &str, body: DecisionPoly) -> Result<(), SosError> {
        self.add_sos_with_degree(name, body, None)
    }

    /// SOS constraint with an explicit Gram basis degree.
    pub fn add_sos_with_degree(
        &mut self,
        name: &str,
        body: DecisionPoly,
        half_degree: Option<u32>,
    ) -> Result<(), SosError> {
        self.check_body(&body)?;
        self.constraints.push(Constraint {
            name: name.to_string(),
            kind: ConstraintKind::Sos,
            body,
            half_degree,
        });
        Ok(())
    }

    pub fn add_zero(&mut self, name: &str, body: DecisionPoly) -> Result<(), SosError> {
        self.check_body(&body)?;
        self.constraints.push(Constraint {
            name: name.to_string(),
            kind: ConstraintKind::Zero,
            body,
            half_degree: None,
        });
        Ok(())
    }

    pub fn minimize(&mut self, objective: LinearExpr) -> Result<(), SosError> {
        if let Some(&id) = objective.coeffs.keys().find(|&&id| id >= self.vars.len()) {
            return Err(SosError::UnknownDecision(id));
        }
        self.objective = objective;
        Ok(())
    }

    /// `body + sum S_j F_j` with a fresh multiplier `S_j` per known term.
    /// SOS-signed multipliers get their own SOS constraint.
    pub fn s_procedure_augment(
        &mut self,
        body: &DecisionPoly,
        known: &[KnownTerm],
    ) -> Result<DecisionPoly, SosError> {
        let mut out = body.clone();
        for k in known {
            if k.poly.nvars() != self.nvars {
                return Err(SosError::NvarsMismatch {
                    expected: self.nvars,
                    got: k.poly.nvars(),
                });
            }
            let s = match k.sign {
                MultiplierSign::Sos => self.new_sos_poly(&k.name, k.degree)?,
                MultiplierSign::Free => {
                    self.new_poly(&k.name, &monomial_basis(self.nvars, k.degree))?
                }
            };
            out.add_scaled(&s.mul_poly(&k.poly), 1.0);
        }
        Ok(out)
    }

    /// Block SDP whose free variables are exactly the decisions, in order.
    pub fn compile(&self) -> Result<CompiledSos, SosError> {
        let mut blocks = Vec::new();
        let mut equalities = Vec::new();
        let mut grams = Vec::new();

        let decision_row = |e: &LinearExpr, sign: f64| -> Vec<(usize, f64)> {
            e.coeffs.iter().map(|(&id, &c)| (id, sign * c)).collect()
        };

        for (ci, c) in self.constraints.iter().enumerate() {
            match c.kind {
                ConstraintKind::Zero => {
                    for (_, e) in c.body.terms() {
                        if e.is_constant() {
                            return Err(SosError::StructurallyInfeasible {
                                name: c.name.clone(),
                                value: e.constant,
                            });
                        }
                        equalities.push(Equality {
                            blocks: Vec::new(),
                            free: decision_row(e, 1.0),
                            rhs: -e.constant,
                        });
                    }
                }
                ConstraintKind::Sos => {
                    let degree = c.body.degree();
                    let half = c.half_degree.unwrap_or(degree / 2);
                    if degree > 2 * half + 1 || (degree > 2 * half && c.half_degree.is_some()) {
                        return Err(SosError::DegreeOverflow {
                            name: c.name.clone(),
                            degree,
                            half,
                        });
                    }
                    // An odd leading degree can only be matched by a padded
                    // Gram matrix whose top block vanishes, which forces the
                    // odd coefficients to zero. Imposing that directly keeps
                    // the block strictly feasible.
                    if degree > 2 * half {
                        for (m, e) in c.body.terms().filter(|(m, _)| m.degree() == degree) {
                            let _ = m;
                            equalities.push(Equality {
                                blocks: Vec::new(),
                                free: decision_row(e, 1.0),
                                rhs: -e.constant,
                            });
                        }
                    }
                    let gram = gram_parameterize(self.nvars, 2 * half)?;
                    let block = blocks.len();
                    blocks.push(BlockKind::Psd(gram.dim()));
                    // z'Qz - body = 0 coefficientwise
                    for (m, pairs) in gram.products() {
                        let mut a = SymSparse::new();
                        for &(i, j) in &pairs {
                            a.push(i, j, 1.0);
                        }
                        let (free, rhs) = match c.body.coefficient(&m) {
                            Some(e) => (decision_row(e, -1.0), e.constant),
                            None => (Vec::new(), 0.0),
                        };
                        equalities.push(Equality {
                            blocks: vec![(block, a)],
                            free,
                            rhs,
                        });
                    }
                    grams.push(GramInfo {
                        constraint: ci,
                        block,
                        gram,
                    });
                }
            }
        }

        let mut sdp = SdpProblem::new(blocks, self.vars.len());
        sdp.equalities = equalities;
        for (k, v) in self.vars.iter().enumerate() {
            sdp.free_bounds[k] = (v.lo, v.hi);
        }
        for (&id, &c) in &self.objective.coeffs {
            sdp.cost_free[id] = c;
        }
        sdp.cost_offset = self.objective.constant;
        sdp.validate()?;
        Ok(CompiledSos {
            sdp,
            map: VariableMap { grams },
        })
    }

    /// Compile, solve and extract.
    pub fn solve(&self, opts: &SolveOptions) -> Result<SosSolution, SosError> {
        let compiled = self.compile()?;
        let sol = solve(&compiled.sdp, opts)?;
        extract(&sol, &compiled.map, self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramInfo {
    pub constraint: usize,
    pub block: usize,
    pub gram: GramBlock,
}

/// Where each SOS constraint's Gram matrix lives in the compiled SDP.
/// Decisions map to free variables with the same index.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableMap {
    pub grams: Vec<GramInfo>,
}

#[derive(Debug, Clone)]
pub struct CompiledSos {
    pub sdp: SdpProblem,
    pub map: VariableMap,
}

/// Numeric SOS decomposition of one constraint body.
#[derive(Debug, Clone)]
pub struct SosDecomposition {
    pub constraint: String,
    pub basis: Vec<Monomial>,
    pub gram: DMatrix<f64>,
    pub factors: Vec<Polynomial>,
    /// Largest coefficient difference between `sum f_i^2` and the body,
    /// divided by the largest body coefficient when that exceeds one.
    pub recomposition_error: f64,
}

#[derive(Debug, Clone)]
pub struct SosSolution {
    pub status: SdpStatus,
    pub objective: f64,
    pub values: Vec<f64>,
    pub polys: BTreeMap<String, Polynomial>,
    pub decompositions: Vec<SosDecomposition>,
    pub record: SolveRecord,
}

impl SosSolution {
    pub fn poly(&self, name: &str) -> Option<&Polynomial> {
        self.polys.get(name)
    }

    /// Value of a scalar decision created with [`SosProgram::new_scalar`].
    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.polys.get(name).map(|p| {
            let one = Monomial::one(p.nvars());
            p.coefficient(&one)
        })
    }

    pub fn max_recomposition_error(&self) -> f64 {
        self.decompositions
            .iter()
            .map(|d| d.recomposition_error)
            .fold(0.0, f64::max)
    }
}

/// Factors `f_i = sqrt(l_i) v_i' z` of a Gram matrix after clipping
/// eigenvalues below [`EIGEN_CLIP`].
pub fn sos_factors(gram: &GramBlock, q: &DMatrix<f64>) -> Vec<Polynomial> {
    let nvars = gram.basis.first().map_or(0, Monomial::nvars);
    let sym = (q + q.transpose()) * 0.5;
    let (vals, vecs) = sym_eigen(&sym);
    let mut out = Vec::new();
    for k in (0..vals.len()).rev() {
        if vals[k] <= EIGEN_CLIP {
            continue;
        }
        let s = vals[k].sqrt();
        let mut f = Polynomial::zero(nvars);
        for (i, m) in gram.basis.iter().enumerate() {
            f.add_term(m.clone(), s * vecs[(i, k)]);
        }
        if !f.is_zero() {
            out.push(f);
        }
    }
    out
}

pub fn extract(
    solution: &SdpSolution,
    map: &VariableMap,
    program: &SosProgram,
) -> Result<SosSolution, SosError> {
    if !solution.status.is_usable() {
        return Err(SosError::Unusable(solution.status));
    }
    let values = solution.free.clone();
    let polys = program
        .polys
        .iter()
        .map(|np| {
            let mut p = Polynomial::zero(program.nvars);
            for (m, &id) in np.basis.iter().zip(&np.ids) {
                p.add_term(m.clone(), values[id]);
            }
            (np.name.clone(), p)
        })
        .collect();
    let decompositions = map
        .grams
        .iter()
        .map(|g| {
            let q = &solution.primal_blocks[g.block];
            let factors = sos_factors(&g.gram, q);
            let mut sum = Polynomial::zero(program.nvars);
            for f in &factors {
                sum = &sum + &(f * f);
            }
            let body = program.constraints[g.constraint].body.evaluate(&values);
            SosDecomposition {
                constraint: program.constraints[g.constraint].name.clone(),
                basis: g.gram.basis.clone(),
                gram: q.clone(),
                recomposition_error: sum.max_coefficient_diff(&body) / body.max_abs_coefficient().max(1.0),
                factors,
            }
        })
        .collect();
    Ok(SosSolution {
        status: solution.status,
        objective: solution.primal_objective,
        values,
        polys,
        decompositions,
        record: solution.report(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::parse_poly;

    #[test]
    fn gram_sizes() {
        assert_eq!(gram_parameterize(1, 2).unwrap().dim(), 2);
        assert_eq!(gram_parameterize(3, 4).unwrap().dim(), 10);
        assert_eq!(gram_parameterize(3, 10).unwrap().dim(), 56);
        assert_eq!(gram_parameterize(2, 3), Err(SosError::OddDegree(3)));
    }

    #[test]
    fn structure_of_scalar_minus_square() {
        let mut prog = SosProgram::new(1);
        let c = prog.new_scalar("c").unwrap();
        let mut body = DecisionPoly::scalar(1, c);
        body.add_poly(&parse_poly("x^2", &["x"]).unwrap(), -1.0);
        prog.add_sos("body", body).unwrap();
        prog.minimize(LinearExpr::term(c, -1.0)).unwrap();
        let compiled = prog.compile().unwrap();
        assert_eq!(compiled.sdp.blocks, vec![BlockKind::Psd(2)]);
        assert_eq!(compiled.sdp.equalities.len(), 3);
        assert_eq!(compiled.sdp.free_vars, 1);
    }

    #[test]
    fn square_plus_constant_has_zero_minimum() {
        let mut prog = SosProgram::new(1);
        let c = prog.new_scalar("c").unwrap();
        let mut body = DecisionPoly::scalar(1, c);
        body.add_poly(&parse_poly("x^2", &["x"]).unwrap(), 1.0);
        prog.add_sos("body", body).unwrap();
        prog.minimize(LinearExpr::var(c)).unwrap();
        let sol = prog.solve(&SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!(sol.scalar("c").unwrap().abs() < 1e-7);
        assert!(sol.objective.abs() < 1e-7);
        let d = &sol.decompositions[0];
        assert_eq!(d.factors.len(), 1);
        let f = &d.factors[0];
        let x = Monomial::var(1, 0);
        assert!((f.coefficient(&x).abs() - 1.0).abs() < 1e-6);
        assert!(d.recomposition_error < 1e-6);
    }

    #[test]
    fn zero_constraints_are_linear_equalities() {
        let mut prog = SosProgram::new(1);
        let p = prog.new_poly("p", &monomial_basis(1, 1)).unwrap();
        let mut body = p.clone();
        body.add_poly(&parse_poly("2*x - 3", &["x"]).unwrap(), -1.0);
        prog.add_zero("fit", body).unwrap();
        let sol = prog.solve(&SolveOptions::default()).unwrap();
        let got = sol.poly("p").unwrap();
        assert!(got.max_coefficient_diff(&parse_poly("2*x - 3", &["x"]).unwrap()) < 1e-7);

        let mut bad = SosProgram::new(1);
        bad.add_zero("const", DecisionPoly::from_poly(&Polynomial::constant(1, 1.0)))
            .unwrap();
        assert!(matches!(
            bad.compile(),
            Err(SosError::StructurallyInfeasible { .. })
        ));
    }

    #[test]
    fn degree_overflow_is_reported() {
        let mut prog = SosProgram::new(1);
        let body = DecisionPoly::from_poly(&parse_poly("x^4", &["x"]).unwrap());
        prog.add_sos_with_degree("b", body, Some(1)).unwrap();
        assert!(matches!(prog.compile(), Err(SosError::DegreeOverflow { .. })));
    }

    #[test]
    fn unknown_decisions_are_rejected() {
        let mut prog = SosProgram::new(1);
        assert_eq!(
            prog.add_sos("b", DecisionPoly::scalar(1, 3)),
            Err(SosError::UnknownDecision(3))
        );
        assert_eq!(
            prog.minimize(LinearExpr::var(0)),
            Err(SosError::UnknownDecision(0))
        );
    }

    #[test]
    fn augment_with_nothing_is_identity() {
        let mut prog = SosProgram::new(1);
        let body = DecisionPoly::from_poly(&parse_poly("x^2 + 1", &["x"]).unwrap());
        assert_eq!(prog.s_procedure_augment(&body, &[]).unwrap(), body);
    }

    #[test]
    fn degree_zero_sos_multiplier_is_nonnegative_scalar() {
        // minimize s with x^2 - 1 + s (4 - x^2) SOS: needs s <= 1, 4 s >= 1
        let mut prog = SosProgram::new(1);
        let body = DecisionPoly::from_poly(&parse_poly("x^2 - 1", &["x"]).unwrap());
        let aug = prog
            .s_procedure_augment(
                &body,
                &[KnownTerm {
                    name: "s".into(),
                    poly: parse_poly("4 - x^2", &["x"]).unwrap(),
                    degree: 0,
                    sign: MultiplierSign::Sos,
                }],
            )
            .unwrap();
        prog.add_sos("body", aug).unwrap();
        let s = prog.poly_ids("s").unwrap()[0];
        prog.minimize(LinearExpr::var(s)).unwrap();
        let compiled = prog.compile().unwrap();
        assert_eq!(compiled.sdp.blocks.len(), 2);
        assert_eq!(compiled.sdp.blocks[0], BlockKind::Psd(1));
        let sol = prog.solve(&SolveOptions::default()).unwrap();
        assert!((sol.scalar("s").unwrap() - 0.25).abs() < 1e-6);
    }
}
