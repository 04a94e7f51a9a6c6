//! Sparse multivariate polynomials over named variables.
//!
//! Coefficients are `f64`; the term map is keyed by exact integer exponent
//! vectors in graded order. Any coefficient whose magnitude falls below
//! [`DROP_TOL`] after an arithmetic operation is removed, so an exact
//! cancellation always yields the zero polynomial.

mod monomial;
mod parse;

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use monomial::{monomial_basis, monomials_of_degree, Monomial};
pub use parse::{parse_poly, parse_poly_with, ParseContext};

/// Coefficients smaller than this in magnitude are dropped after arithmetic.
pub const DROP_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown variable `{name}` at position {pos}")]
    UnknownVariable { name: String, pos: usize },
    #[error("invalid exponent `{text}` at position {pos}: expected a non-negative integer literal")]
    BadExponent { text: String, pos: usize },
    #[error("variable count mismatch: {left} vs {right}")]
    NvarsMismatch { left: usize, right: usize },
    #[error("point has {got} coordinates but the polynomial has {expected} variables")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no assignment given for variable {0}")]
    MissingAssignment(usize),
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolyRepr", try_from = "PolyRepr")]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Monomial, f64>,
}

/// Serialized form: a term list, since exponent vectors cannot be map keys
/// in most text formats.
#[derive(Serialize, Deserialize)]
struct PolyRepr {
    nvars: usize,
    terms: Vec<(Monomial, f64)>,
}

impl From<Polynomial> for PolyRepr {
    fn from(p: Polynomial) -> Self {
        PolyRepr {
            nvars: p.nvars,
            terms: p.terms.into_iter().collect(),
        }
    }
}

impl TryFrom<PolyRepr> for Polynomial {
    type Error = PolyError;

    fn try_from(r: PolyRepr) -> Result<Self, PolyError> {
        Polynomial::from_terms(r.nvars, r.terms)
    }
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Polynomial {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(Monomial::one(nvars), c);
        p
    }

    /// The coordinate polynomial `x_var`.
    pub fn var(nvars: usize, var: usize) -> Self {
        assert!(var < nvars, "variable index {var} out of range for {nvars} variables");
        let mut p = Self::zero(nvars);
        p.add_term(Monomial::var(nvars, var), 1.0);
        p
    }

    pub fn monomial(m: Monomial, c: f64) -> Self {
        let mut p = Self::zero(m.nvars());
        p.add_term(m, c);
        p
    }

    /// Builds a polynomial from `(exponents, coefficient)` pairs, summing
    /// repeated monomials.
    pub fn from_terms<I>(nvars: usize, terms: I) -> Result<Self, PolyError>
    where
        I: IntoIterator<Item = (Monomial, f64)>,
    {
        let mut p = Self::zero(nvars);
        for (m, c) in terms {
            if m.nvars() != nvars {
                return Err(PolyError::NvarsMismatch {
                    left: nvars,
                    right: m.nvars(),
                });
            }
            p.add_term(m, c);
        }
        Ok(p)
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl DoubleEndedIterator<Item = (&Monomial, f64)> + '_ {
        self.terms.iter().map(|(m, &c)| (m, c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coefficient(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; the zero polynomial has degree 0.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Monomial::degree).max().unwrap_or(0)
    }

    /// Largest coefficient magnitude.
    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.values().fold(0.0, |a, c| a.max(c.abs()))
    }

    /// Adds `c * m` in place, dropping the term if it cancels.
    pub fn add_term(&mut self, m: Monomial, c: f64) {
        debug_assert_eq!(m.nvars(), self.nvars);
        match self.terms.entry(m) {
            Entry::Vacant(v) => {
                if c.abs() >= DROP_TOL {
                    v.insert(c);
                }
            }
            Entry::Occupied(mut o) => {
                let s = *o.get() + c;
                if s.abs() < DROP_TOL {
                    o.remove();
                } else {
                    *o.get_mut() = s;
                }
            }
        }
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| c.abs() >= DROP_TOL);
    }

    fn check_nvars(&self, other: &Polynomial) -> Result<(), PolyError> {
        if self.nvars == other.nvars {
            Ok(())
        } else {
            Err(PolyError::NvarsMismatch {
                left: self.nvars,
                right: other.nvars,
            })
        }
    }

    pub fn checked_add(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_nvars(other)?;
        let mut out = self.clone();
        for (m, c) in &other.terms {
            *out.terms.entry(m.clone()).or_insert(0.0) += c;
        }
        out.prune();
        Ok(out)
    }

    pub fn checked_sub(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.checked_add(&other.scale(-1.0))
    }

    pub fn checked_mul(&self, other: &Polynomial) -> Result<Polynomial, PolyError> {
        self.check_nvars(other)?;
        let mut terms: BTreeMap<Monomial, f64> = BTreeMap::new();
        for (m1, c1) in &self.terms {
            for (m2, c2) in &other.terms {
                *terms.entry(m1.mul(m2)).or_insert(0.0) += c1 * c2;
            }
        }
        let mut out = Polynomial {
            nvars: self.nvars,
            terms,
        };
        out.prune();
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        let mut out = Polynomial {
            nvars: self.nvars,
            terms: self.terms.iter().map(|(m, c)| (m.clone(), c * s)).collect(),
        };
        out.prune();
        out
    }

    pub fn pow(&self, k: u32) -> Polynomial {
        let mut result = Polynomial::constant(self.nvars, 1.0);
        let mut base = self.clone();
        let mut k = k;
        while k > 0 {
            if k & 1 == 1 {
                result = &result * &base;
            }
            k >>= 1;
            if k > 0 {
                base = &base * &base;
            }
        }
        result
    }

    pub fn derivative(&self, var: usize) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for (m, c) in &self.terms {
            if let Some((e, dm)) = m.differentiate(var) {
                *out.terms.entry(dm).or_insert(0.0) += c * e as f64;
            }
        }
        out.prune();
        out
    }

    /// `(dp/dx_1, ..., dp/dx_n)`.
    pub fn gradient(&self) -> Vec<Polynomial> {
        (0..self.nvars).map(|i| self.derivative(i)).collect()
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<f64, PolyError> {
        if point.len() != self.nvars {
            return Err(PolyError::DimensionMismatch {
                expected: self.nvars,
                got: point.len(),
            });
        }
        Ok(self.eval_unchecked(point))
    }

    /// Evaluation without the dimension check; extra coordinates are ignored.
    pub fn eval_unchecked(&self, point: &[f64]) -> f64 {
        self.terms.iter().map(|(m, c)| c * m.evaluate(point)).sum()
    }

    /// Replaces every variable `x_i` by `images[i]`. All images must share
    /// one variable count, which becomes the result's.
    pub fn compose(&self, images: &[Polynomial]) -> Result<Polynomial, PolyError> {
        if images.len() < self.nvars {
            return Err(PolyError::MissingAssignment(images.len()));
        }
        if images.len() > self.nvars {
            return Err(PolyError::NvarsMismatch {
                left: self.nvars,
                right: images.len(),
            });
        }
        let target = match images.first() {
            Some(p) => p.nvars,
            None => return Ok(Polynomial::constant(0, self.coefficient(&Monomial::one(0)))),
        };
        for img in images {
            if img.nvars != target {
                return Err(PolyError::NvarsMismatch {
                    left: target,
                    right: img.nvars,
                });
            }
        }
        // cache powers of each image
        let mut powers: Vec<Vec<Polynomial>> =
            images.iter().map(|p| vec![Polynomial::constant(target, 1.0), p.clone()]).collect();
        let mut out = Polynomial::zero(target);
        for (m, c) in &self.terms {
            let mut term = Polynomial::constant(target, *c);
            for (i, &e) in m.exponents().iter().enumerate() {
                if e == 0 {
                    continue;
                }
                while powers[i].len() <= e as usize {
                    let next = powers[i].last().unwrap() * &images[i];
                    powers[i].push(next);
                }
                term = &term * &powers[i][e as usize];
            }
            for (tm, tc) in term.terms {
                *out.terms.entry(tm).or_insert(0.0) += tc;
            }
        }
        out.prune();
        Ok(out)
    }

    /// For a polynomial over `nstates` state variables followed by input
    /// variables, substitutes each input by a polynomial in the states. The
    /// state variables map to themselves.
    pub fn substitute_inputs(
        &self,
        nstates: usize,
        inputs: &[Polynomial],
    ) -> Result<Polynomial, PolyError> {
        let ninputs = self.nvars.saturating_sub(nstates);
        if inputs.len() < ninputs {
            return Err(PolyError::MissingAssignment(nstates + inputs.len()));
        }
        let mut images: Vec<Polynomial> = (0..nstates).map(|i| Polynomial::var(nstates, i)).collect();
        images.extend(inputs.iter().take(ninputs).cloned());
        self.compose(&images)
    }

    /// Re-expresses the polynomial over `new_nvars` variables, sending
    /// variable `i` to `map[i]`.
    pub fn embed(&self, new_nvars: usize, map: &[usize]) -> Polynomial {
        assert_eq!(map.len(), self.nvars);
        let mut out = Polynomial::zero(new_nvars);
        for (m, c) in &self.terms {
            let mut e = vec![0; new_nvars];
            for (i, &k) in m.exponents().iter().enumerate() {
                e[map[i]] += k;
            }
            out.add_term(Monomial::new(e), *c);
        }
        out
    }

    /// Keeps the first `nvars` variables and sets the rest to zero.
    pub fn truncate_vars(&self, nvars: usize) -> Polynomial {
        let mut out = Polynomial::zero(nvars);
        for (m, c) in &self.terms {
            if m.exponents()[nvars..].iter().all(|&e| e == 0) {
                out.add_term(Monomial::new(m.exponents()[..nvars].to_vec()), *c);
            }
        }
        out
    }

    /// Collects the coefficient of `x_var^k` as a polynomial in the
    /// remaining variables (same variable count, `x_var` absent).
    pub fn coefficient_of_power(&self, var: usize, k: u32) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for (m, c) in &self.terms {
            if m.exponents()[var] == k {
                let mut e = m.exponents().to_vec();
                e[var] = 0;
                out.add_term(Monomial::new(e), *c);
            }
        }
        out
    }

    /// Largest coefficient difference against `other`.
    pub fn max_coefficient_diff(&self, other: &Polynomial) -> f64 {
        let mut worst: f64 = 0.0;
        for (m, c) in &self.terms {
            worst = worst.max((c - other.coefficient(m)).abs());
        }
        for (m, c) in &other.terms {
            if !self.terms.contains_key(m) {
                worst = worst.max(c.abs());
            }
        }
        worst
    }

    pub fn display<'a>(&'a self, names: &'a [String]) -> PolyDisplay<'a> {
        PolyDisplay { poly: self, names }
    }
}

impl fmt::Debug for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = (1..=self.nvars).map(|i| format!("x{i}")).collect();
        write!(f, "{}", self.display(&names))
    }
}

/// Canonical text form: terms in descending graded order, coefficients in
/// shortest round-trip notation. Parsing the output reproduces the
/// polynomial exactly.
pub struct PolyDisplay<'a> {
    poly: &'a Polynomial,
    names: &'a [String],
}

impl fmt::Display for PolyDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.poly.is_zero() {
            return write!(f, "0");
        }
        for (k, (m, c)) in self.poly.terms.iter().rev().enumerate() {
            let mag = c.abs();
            if k == 0 {
                if *c < 0.0 {
                    write!(f, "-")?;
                }
            } else if *c < 0.0 {
                write!(f, " - ")?;
            } else {
                write!(f, " + ")?;
            }
            let mut parts: Vec<String> = Vec::new();
            if m.is_one() || mag != 1.0 {
                parts.push(format!("{mag}"));
            }
            for (i, &e) in m.exponents().iter().enumerate() {
                match e {
                    0 => {}
                    1 => parts.push(self.names[i].clone()),
                    _ => parts.push(format!("{}^{e}", self.names[i])),
                }
            }
            write!(f, "{}", parts.join("*"))?;
        }
        Ok(())
    }
}

impl Add for &Polynomial {
    type Output = Polynomial;
    fn add(self, rhs: &Polynomial) -> Polynomial {
        self.checked_add(rhs).expect("polynomial addition")
    }
}

impl Sub for &Polynomial {
    type Output = Polynomial;
    fn sub(self, rhs: &Polynomial) -> Polynomial {
        self.checked_sub(rhs).expect("polynomial subtraction")
    }
}

impl Mul for &Polynomial {
    type Output = Polynomial;
    fn mul(self, rhs: &Polynomial) -> Polynomial {
        self.checked_mul(rhs).expect("polynomial multiplication")
    }
}

impl Neg for &Polynomial {
    type Output = Polynomial;
    fn neg(self) -> Polynomial {
        self.scale(-1.0)
    }
}

/// `sum_i a_i * b_i` for equal-length polynomial vectors.
pub fn dot(a: &[Polynomial], b: &[Polynomial]) -> Polynomial {
    assert_eq!(a.len(), b.len());
    let nvars = a.first().map(|p| p.nvars).unwrap_or(0);
    a.iter()
        .zip(b)
        .fold(Polynomial::zero(nvars), |acc, (x, y)| &acc + &(x * y))
}

/// Dense `rows x cols` grid of polynomials sharing one variable count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyMat {
    rows: usize,
    cols: usize,
    entries: Vec<Polynomial>,
}

impl PolyMat {
    pub fn zeros(rows: usize, cols: usize, nvars: usize) -> Self {
        PolyMat {
            rows,
            cols,
            entries: vec![Polynomial::zero(nvars); rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<Polynomial>>) -> Result<Self, PolyError> {
        let r = rows.len();
        let c = rows.first().map(Vec::len).unwrap_or(0);
        let nvars = rows.first().and_then(|row| row.first()).map(|p| p.nvars).unwrap_or(0);
        let mut entries = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(PolyError::DimensionMismatch {
                    expected: c,
                    got: row.len(),
                });
            }
            for p in row {
                if p.nvars != nvars {
                    return Err(PolyError::NvarsMismatch {
                        left: nvars,
                        right: p.nvars,
                    });
                }
                entries.push(p);
            }
        }
        Ok(PolyMat {
            rows: r,
            cols: c,
            entries,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> &Polynomial {
        &self.entries[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, p: Polynomial) {
        self.entries[i * self.cols + j] = p;
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(Polynomial::is_zero)
    }

    /// Matrix-vector product `G v`.
    pub fn mul_vec(&self, v: &[Polynomial]) -> Vec<Polynomial> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                let row: Vec<Polynomial> = (0..self.cols).map(|j| self.get(i, j).clone()).collect();
                dot(&row, v)
            })
            .collect()
    }

    pub fn evaluate(&self, point: &[f64]) -> Vec<f64> {
        self.entries.iter().map(|p| p.eval_unchecked(point)).collect()
    }
}
