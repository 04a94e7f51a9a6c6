use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};

use crate::poly::{Monomial, Polynomial, DROP_TOL};

/// Index of a scalar decision variable inside an [`super::SosProgram`].
pub type DecisionId = usize;

/// `constant + sum coeffs[id] * decision[id]`
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearExpr {
    pub constant: f64,
    pub coeffs: BTreeMap<DecisionId, f64>,
}

impl LinearExpr {
    pub fn constant(c: f64) -> Self {
        LinearExpr {
            constant: c,
            coeffs: BTreeMap::new(),
        }
    }

    pub fn var(id: DecisionId) -> Self {
        Self::term(id, 1.0)
    }

    pub fn term(id: DecisionId, c: f64) -> Self {
        let mut coeffs = BTreeMap::new();
        if c != 0.0 {
            coeffs.insert(id, c);
        }
        LinearExpr {
            constant: 0.0,
            coeffs,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.coeffs.is_empty()
    }

    pub fn is_constant(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &LinearExpr, s: f64) {
        self.constant = drop_small(self.constant + s * other.constant);
        for (&id, &c) in &other.coeffs {
            let e = self.coeffs.entry(id).or_insert(0.0);
            *e += s * c;
            if e.abs() < DROP_TOL {
                self.coeffs.remove(&id);
            }
        }
    }

    pub fn scaled(&self, s: f64) -> LinearExpr {
        let mut out = LinearExpr::default();
        out.add_scaled(self, s);
        out
    }

    pub fn evaluate(&self, values: &[f64]) -> f64 {
        self.constant
            + self
                .coeffs
                .iter()
                .map(|(&id, &c)| c * values[id])
                .sum::<f64>()
    }
}

fn drop_small(c: f64) -> f64 {
    if c.abs() < DROP_TOL {
        0.0
    } else {
        c
    }
}

/// Polynomial in the state variables whose coefficients are affine in the
/// decision variables. Products of two decision polynomials are not
/// representable, which keeps every constraint linear in the decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionPoly {
    nvars: usize,
    terms: BTreeMap<Monomial, LinearExpr>,
}

impl DecisionPoly {
    pub fn zero(nvars: usize) -> Self {
        DecisionPoly {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn from_poly(p: &Polynomial) -> Self {
        let mut out = Self::zero(p.nvars());
        for (m, c) in p.terms() {
            out.add_term(m.clone(), &LinearExpr::constant(c));
        }
        out
    }

    /// Constant polynomial equal to a single decision variable.
    pub fn scalar(nvars: usize, id: DecisionId) -> Self {
        let mut out = Self::zero(nvars);
        out.add_term(Monomial::one(nvars), &LinearExpr::var(id));
        out
    }

    /// `sum ids[k] * basis[k]`
    pub fn from_basis(nvars: usize, basis: &[Monomial], ids: &[DecisionId]) -> Self {
        let mut out = Self::zero(nvars);
        for (m, &id) in basis.iter().zip(ids) {
            out.add_term(m.clone(), &LinearExpr::var(id));
        }
        out
    }

    /// Constant polynomial with an affine coefficient.
    pub fn from_linear(nvars: usize, expr: &LinearExpr) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(Monomial::one(nvars), expr);
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &LinearExpr)> {
        self.terms.iter()
    }

    pub fn coefficient(&self, m: &Monomial) -> Option<&LinearExpr> {
        self.terms.get(m)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    pub fn decisions(&self) -> BTreeSet<DecisionId> {
        self.terms
            .values()
            .flat_map(|e| e.coeffs.keys().copied())
            .collect()
    }

    /// `self += s * expr * m`
    pub fn add_term_scaled(&mut self, m: Monomial, expr: &LinearExpr, s: f64) {
        debug_assert_eq!(m.nvars(), self.nvars);
        match self.terms.entry(m) {
            Entry::Occupied(mut o) => {
                o.get_mut().add_scaled(expr, s);
                if o.get().is_zero() {
                    o.remove();
                }
            }
            Entry::Vacant(v) => {
                let e = expr.scaled(s);
                if !e.is_zero() {
                    v.insert(e);
                }
            }
        }
    }

    pub fn add_term(&mut self, m: Monomial, expr: &LinearExpr) {
        self.add_term_scaled(m, expr, 1.0);
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &DecisionPoly, s: f64) {
        assert_eq!(self.nvars, other.nvars, "decision polynomial nvars mismatch");
        for (m, e) in &other.terms {
            self.add_term_scaled(m.clone(), e, s);
        }
    }

    pub fn add_poly(&mut self, p: &Polynomial, s: f64) {
        assert_eq!(self.nvars, p.nvars(), "decision polynomial nvars mismatch");
        for (m, c) in p.terms() {
            self.add_term_scaled(m.clone(), &LinearExpr::constant(c), s);
        }
    }

    pub fn plus(&self, other: &DecisionPoly) -> DecisionPoly {
        let mut out = self.clone();
        out.add_scaled(other, 1.0);
        out
    }

    pub fn minus(&self, other: &DecisionPoly) -> DecisionPoly {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    pub fn scaled(&self, s: f64) -> DecisionPoly {
        let mut out = Self::zero(self.nvars);
        out.add_scaled(self, s);
        out
    }

    /// Product with a numeric polynomial.
    pub fn mul_poly(&self, p: &Polynomial) -> DecisionPoly {
        assert_eq!(self.nvars, p.nvars(), "decision polynomial nvars mismatch");
        let mut out = Self::zero(self.nvars);
        for (m, e) in &self.terms {
            for (pm, c) in p.terms() {
                out.add_term_scaled(m.mul(pm), e, c);
            }
        }
        out
    }

    pub fn derivative(&self, var: usize) -> DecisionPoly {
        let mut out = Self::zero(self.nvars);
        for (m, e) in &self.terms {
            if let Some((k, dm)) = m.differentiate(var) {
                out.add_term_scaled(dm, e, k as f64);
            }
        }
        out
    }

    pub fn gradient(&self) -> Vec<DecisionPoly> {
        (0..self.nvars).map(|i| self.derivative(i)).collect()
    }

    /// `sum_k field[k] * d(self)/dx_k`, the derivative along a numeric
    /// vector field.
    pub fn lie_derivative(&self, field: &[Polynomial]) -> DecisionPoly {
        let mut out = Self::zero(self.nvars);
        for (k, fk) in field.iter().enumerate() {
            out.add_scaled(&self.derivative(k).mul_poly(fk), 1.0);
        }
        out
    }

    /// Numeric polynomial obtained by fixing every decision.
    pub fn evaluate(&self, values: &[f64]) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for (m, e) in &self.terms {
            out.add_term(m.clone(), e.evaluate(values));
        }
        out
    }

    /// The decision-free part.
    pub fn constant_part(&self) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for (m, e) in &self.terms {
            out.add_term(m.clone(), e.constant);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::parse_poly;

    #[test]
    fn affine_arithmetic_evaluates_consistently() {
        let vars = ["x", "y"];
        let v = DecisionPoly::from_basis(
            2,
            &[Monomial::new(vec![2, 0]), Monomial::new(vec![0, 1])],
            &[0, 1],
        );
        let f = vec![parse_poly("-x + y", &vars).unwrap(), parse_poly("x*y", &vars).unwrap()];
        let lie = v.lie_derivative(&f);
        let vals = [3.0, -2.0];
        let vn = v.evaluate(&vals);
        let expect = crate::poly::dot(&f, &vn.gradient());
        assert!(lie.evaluate(&vals).max_coefficient_diff(&expect) < 1e-14);
    }

    #[test]
    fn cancellation_removes_terms() {
        let mut p = DecisionPoly::scalar(1, 4);
        p.add_scaled(&DecisionPoly::scalar(1, 4), -1.0);
        assert!(p.is_zero());
        let mut e = LinearExpr::term(1, 2.0);
        e.add_scaled(&LinearExpr::term(1, 1.0), -2.0);
        assert!(e.is_zero());
    }

    #[test]
    fn mul_poly_and_constant_part() {
        let x = Polynomial::var(1, 0);
        let mut p = DecisionPoly::scalar(1, 0);
        p.add_poly(&Polynomial::constant(1, 2.0), 1.0);
        let q = p.mul_poly(&x);
        assert_eq!(q.degree(), 1);
        assert_eq!(q.constant_part(), x.scale(2.0));
        assert_eq!(q.decisions().into_iter().collect::<Vec<_>>(), vec![0]);
    }
}
