use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Exponent vector over a fixed variable ordering.
///
/// Ordering is graded: lower total degree sorts first; within a degree the
/// exponent vectors compare lexicographically with larger leading exponents
/// first, so the degree-one monomials come out as `x1, x2, ..., xn`.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn new(exponents: Vec<u32>) -> Self {
        Monomial(exponents)
    }

    pub fn one(nvars: usize) -> Self {
        Monomial(vec![0; nvars])
    }

    /// The monomial `x_var`.
    pub fn var(nvars: usize, var: usize) -> Self {
        let mut e = vec![0; nvars];
        e[var] = 1;
        Monomial(e)
    }

    pub fn nvars(&self) -> usize {
        self.0.len()
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_one(&self) -> bool {
        self.0.iter().all(|&e| e == 0)
    }

    pub fn mul(&self, other: &Monomial) -> Monomial {
        debug_assert_eq!(self.nvars(), other.nvars());
        Monomial(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// Evaluate at a point; `point.len()` must equal `nvars`.
    pub fn evaluate(&self, point: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(point)
            .filter(|(&e, _)| e > 0)
            .map(|(&e, &x)| x.powi(e as i32))
            .product()
    }

    /// Exponent vector with `var` lowered by one, with the old exponent as the
    /// multiplier. `None` when the variable is absent.
    pub fn differentiate(&self, var: usize) -> Option<(u32, Monomial)> {
        let e = self.0[var];
        if e == 0 {
            return None;
        }
        let mut out = self.0.clone();
        out[var] -= 1;
        Some((e, Monomial(out)))
    }

    /// `2 * self`, the square of the monomial.
    pub fn squared(&self) -> Monomial {
        Monomial(self.0.iter().map(|e| 2 * e).collect())
    }
}

impl Ord for Monomial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for Monomial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// All monomials in `nvars` variables of total degree at most `maxdeg`, in
/// graded order. The count is `C(nvars + maxdeg, maxdeg)`.
pub fn monomial_basis(nvars: usize, maxdeg: u32) -> Vec<Monomial> {
    let mut out = Vec::new();
    for d in 0..=maxdeg {
        monomials_of_degree(nvars, d, &mut out);
    }
    out
}

/// Monomials of total degree exactly `degree`, appended in graded order.
pub fn monomials_of_degree(nvars: usize, degree: u32, out: &mut Vec<Monomial>) {
    fn rec(pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Monomial>) {
        let n = cur.len();
        if pos == n - 1 {
            cur[pos] = left;
            out.push(Monomial(cur.clone()));
            return;
        }
        for e in (0..=left).rev() {
            cur[pos] = e;
            rec(pos + 1, left - e, cur, out);
        }
        cur[pos] = 0;
    }
    if nvars == 0 {
        if degree == 0 {
            out.push(Monomial(Vec::new()));
        }
        return;
    }
    let mut cur = vec![0; nvars];
    rec(0, degree, &mut cur, out);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binom(n: u64, k: u64) -> u64 {
        (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
    }

    #[test]
    fn basis_counts() {
        assert_eq!(monomial_basis(1, 2).len(), 3);
        assert_eq!(monomial_basis(3, 2).len(), 10);
        assert_eq!(monomial_basis(3, 5).len(), 56);
        for n in 1..5 {
            for d in 0..7 {
                assert_eq!(
                    monomial_basis(n, d).len() as u64,
                    binom(n as u64 + d as u64, d as u64)
                );
            }
        }
    }

    #[test]
    fn basis_order_is_graded_and_sorted() {
        let b = monomial_basis(1, 2);
        assert_eq!(
            b,
            vec![Monomial::new(vec![0]), Monomial::new(vec![1]), Monomial::new(vec![2])]
        );
        let b = monomial_basis(3, 3);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(b[1], Monomial::var(3, 0));
        assert_eq!(b[3], Monomial::var(3, 2));
    }

    #[test]
    fn derivative_and_product() {
        let m = Monomial::new(vec![2, 1]);
        assert_eq!(m.differentiate(0), Some((2, Monomial::new(vec![1, 1]))));
        assert_eq!(Monomial::new(vec![0, 1]).differentiate(0), None);
        assert_eq!(m.mul(&m), m.squared());
        assert_eq!(m.evaluate(&[3.0, 2.0]), 18.0);
    }
}
