//! Controlled polynomial dynamics `x' = f(x) + g(x) u` with a running cost
//! `phi(x, u)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{PolyError, PolyMat, Polynomial};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("{what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Poly(#[from] PolyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolySystem {
    states: Vec<String>,
    inputs: Vec<String>,
    f: Vec<Polynomial>,
    g: PolyMat,
    cost: Polynomial,
    attractor_beta: Option<f64>,
}

impl PolySystem {
    /// `f` and `g` are over the states; `cost` is over the states followed by
    /// the inputs.
    pub fn new(
        states: Vec<String>,
        inputs: Vec<String>,
        f: Vec<Polynomial>,
        g: PolyMat,
        cost: Polynomial,
    ) -> Result<Self, SystemError> {
        let n = states.len();
        let m = inputs.len();
        let dim = |what, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(SystemError::Dimension {
                    what,
                    expected,
                    got,
                })
            }
        };
        dim("number of drift components", n, f.len())?;
        for p in &f {
            dim("drift variable count", n, p.nvars())?;
        }
        if m > 0 {
            dim("input matrix rows", n, g.rows())?;
            dim("input matrix columns", m, g.cols())?;
            for i in 0..n {
                for j in 0..m {
                    dim("input matrix variable count", n, g.get(i, j).nvars())?;
                }
            }
        }
        dim("cost variable count", n + m, cost.nvars())?;
        let g = if m == 0 { PolyMat::zeros(n, 0, n) } else { g };
        Ok(PolySystem {
            states,
            inputs,
            f,
            g,
            cost,
            attractor_beta: None,
        })
    }

    pub fn with_attractor_beta(mut self, beta: Option<f64>) -> Self {
        self.attractor_beta = beta;
        self
    }

    pub fn attractor_beta(&self) -> Option<f64> {
        self.attractor_beta
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn inputs(&self) -> &[String] {
        &self.inputs
    }

    pub fn nstates(&self) -> usize {
        self.states.len()
    }

    pub fn ninputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn drift(&self) -> &[Polynomial] {
        &self.f
    }

    pub fn input_matrix(&self) -> &PolyMat {
        &self.g
    }

    pub fn cost(&self) -> &Polynomial {
        &self.cost
    }

    fn check_inputs(&self, u: &[Polynomial]) -> Result<(), SystemError> {
        if u.len() != self.ninputs() {
            return Err(SystemError::Dimension {
                what: "number of input polynomials",
                expected: self.ninputs(),
                got: u.len(),
            });
        }
        for p in u {
            if p.nvars() != self.nstates() {
                return Err(SystemError::Dimension {
                    what: "input polynomial variable count",
                    expected: self.nstates(),
                    got: p.nvars(),
                });
            }
        }
        Ok(())
    }

    /// Closed-loop field `f + g u` for a state feedback `u(x)`.
    pub fn closed_loop(&self, u: &[Polynomial]) -> Result<Vec<Polynomial>, SystemError> {
        self.check_inputs(u)?;
        if u.is_empty() {
            return Ok(self.f.clone());
        }
        let gu = self.g.mul_vec(u);
        Ok(self.f.iter().zip(&gu).map(|(a, b)| a + b).collect())
    }

    /// Cost along a state feedback, `phi(x, u(x))`.
    pub fn cost_with(&self, u: &[Polynomial]) -> Result<Polynomial, SystemError> {
        self.check_inputs(u)?;
        Ok(self.cost.substitute_inputs(self.nstates(), u)?)
    }

    /// `phi(x, 0)`.
    pub fn state_cost(&self) -> Polynomial {
        self.cost.truncate_vars(self.nstates())
    }

    pub fn zero_inputs(&self) -> Vec<Polynomial> {
        vec![Polynomial::zero(self.nstates()); self.ninputs()]
    }

    /// Numeric `f(x) + g(x) u` into `out`.
    pub fn field_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut v = self.f[i].eval_unchecked(x);
            for (j, &uj) in u.iter().enumerate() {
                if uj != 0.0 {
                    v += self.g.get(i, j).eval_unchecked(x) * uj;
                }
            }
            *o = v;
        }
    }

    /// Numeric `phi(x, u)`.
    pub fn cost_at(&self, x: &[f64], u: &[f64]) -> f64 {
        let mut point = Vec::with_capacity(x.len() + u.len());
        point.extend_from_slice(x);
        point.extend_from_slice(u);
        self.cost.eval_unchecked(&point)
    }

    /// Samples the cost at `samples` uniform points in `[-radius, radius]`
    /// over states and inputs. Returns the most negative sample if any value
    /// is below zero.
    pub fn cost_negativity(&self, samples: usize, radius: f64, seed: u64) -> Option<(Vec<f64>, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.nstates() + self.ninputs();
        let mut worst: Option<(Vec<f64>, f64)> = None;
        for _ in 0..samples {
            let p: Vec<f64> = (0..dim).map(|_| rng.gen_range(-radius..=radius)).collect();
            let v = self.cost.eval_unchecked(&p);
            if v < 0.0 && worst.as_ref().is_none_or(|w| v < w.1) {
                worst = Some((p, v));
            }
        }
        worst
    }
}
