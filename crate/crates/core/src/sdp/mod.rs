//! Block semidefinite programs with free (optionally boxed) scalar
//! variables, solved by a primal-dual interior-point method.
//!
//! Primal form (minimization):
//!
//! ```text
//! min   sum_k <C_k, X_k> + d' w
//! s.t.  sum_k <A_jk, X_k> + a_j' w = b_j      j = 1..m
//!       X_k PSD (or elementwise >= 0 for diagonal blocks),  lo <= w <= hi
//! ```

mod ipm;
mod sdpa;

use nalgebra::DMatrix;

use crate::linalg::min_eigenvalue;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ipm::{solve, SolveOptions};
pub use sdpa::{export_sdpa, import_sdpa, lift_free_vars, read_sdpa, write_sdpa, SdpaError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdpError {
    #[error("block {block} index ({i}, {j}) out of range for dimension {dim}")]
    IndexOutOfRange {
        block: usize,
        i: usize,
        j: usize,
        dim: usize,
    },
    #[error("off-diagonal entry ({i}, {j}) in diagonal block {block}")]
    OffDiagonal { block: usize, i: usize, j: usize },
    #[error("reference to block {0} which does not exist")]
    NoSuchBlock(usize),
    #[error("free variable {index} out of range ({count} declared)")]
    NoSuchFreeVar { index: usize, count: usize },
    #[error("non-finite value in problem data")]
    NonFinite,
    #[error("empty box for free variable {0}")]
    EmptyBox(usize),
}

/// Shape of one matrix block. Diagonal blocks are nonnegative orthants
/// (written with a negative size in SDPA files).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Psd(usize),
    Diag(usize),
}

impl BlockKind {
    pub fn dim(&self) -> usize {
        match *self {
            BlockKind::Psd(n) | BlockKind::Diag(n) => n,
        }
    }
}

/// Symmetric sparse matrix given by its upper triangle (`i <= j`).
///
/// An entry `(i, j, v)` with `i < j` stands for `v` at both `(i, j)` and
/// `(j, i)`, so `<A, X> = sum v X_ii + 2 sum_{i<j} v X_ij`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SymSparse {
    pub entries: Vec<(usize, usize, f64)>,
}

impl SymSparse {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `v` at `(i, j)` and its mirror.
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.entries.push((a, b, v));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorts entries, merges duplicates and drops exact zeros.
    pub fn canonicalize(&mut self) {
        self.entries
            .sort_by_key(|x| (x.0, x.1));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(self.entries.len());
        for &(i, j, v) in &self.entries {
            match out.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => out.push((i, j, v)),
            }
        }
        out.retain(|e| e.2 != 0.0);
        self.entries = out;
    }

    pub fn scaled(&self, s: f64) -> SymSparse {
        SymSparse {
            entries: self.entries.iter().map(|&(i, j, v)| (i, j, v * s)).collect(),
        }
    }

    pub fn inner(&self, x: &DMatrix<f64>) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, v)| if i == j { v * x[(i, j)] } else { 2.0 * v * x[(i, j)] })
            .sum()
    }

    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
            if i != j {
                m[(j, i)] += v;
            }
        }
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, v)| if i == j { v * v } else { 2.0 * v * v })
            .sum::<f64>()
            .sqrt()
    }
}

/// One linear equality: `sum_k <A_k, X_k> + sum_i a_i w_i = rhs`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Equality {
    pub blocks: Vec<(usize, SymSparse)>,
    pub free: Vec<(usize, f64)>,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdpProblem {
    pub blocks: Vec<BlockKind>,
    pub free_vars: usize,
    /// Per free variable `(lo, hi)`; infinite ends mean unbounded.
    pub free_bounds: Vec<(f64, f64)>,
    pub equalities: Vec<Equality>,
    pub cost_blocks: Vec<(usize, SymSparse)>,
    pub cost_free: Vec<f64>,
    /// Constant added to the objective (not representable in SDPA files).
    pub cost_offset: f64,
}

impl SdpProblem {
    pub fn new(blocks: Vec<BlockKind>, free_vars: usize) -> Self {
        SdpProblem {
            blocks,
            free_vars,
            free_bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); free_vars],
            equalities: Vec::new(),
            cost_blocks: Vec::new(),
            cost_free: vec![0.0; free_vars],
            cost_offset: 0.0,
        }
    }

    pub fn num_constraints(&self) -> usize {
        self.equalities.len()
    }

    pub fn set_bounds(&mut self, var: usize, lo: f64, hi: f64) {
        self.free_bounds[var] = (lo, hi);
    }

    pub fn validate(&self) -> Result<(), SdpError> {
        let check_sparse = |block: usize, m: &SymSparse| -> Result<(), SdpError> {
            let kind = *self.blocks.get(block).ok_or(SdpError::NoSuchBlock(block))?;
            let dim = kind.dim();
            for &(i, j, v) in &m.entries {
                if !v.is_finite() {
                    return Err(SdpError::NonFinite);
                }
                if i >= dim || j >= dim {
                    return Err(SdpError::IndexOutOfRange { block, i, j, dim });
                }
                if matches!(kind, BlockKind::Diag(_)) && i != j {
                    return Err(SdpError::OffDiagonal { block, i, j });
                }
            }
            Ok(())
        };
        if self.free_bounds.len() != self.free_vars || self.cost_free.len() != self.free_vars {
            return Err(SdpError::NoSuchFreeVar {
                index: self.free_bounds.len().max(self.cost_free.len()),
                count: self.free_vars,
            });
        }
        for (k, &(lo, hi)) in self.free_bounds.iter().enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(SdpError::EmptyBox(k));
            }
        }
        for eq in &self.equalities {
            if !eq.rhs.is_finite() {
                return Err(SdpError::NonFinite);
            }
            for (b, m) in &eq.blocks {
                check_sparse(*b, m)?;
            }
            for &(i, v) in &eq.free {
                if i >= self.free_vars {
                    return Err(SdpError::NoSuchFreeVar {
                        index: i,
                        count: self.free_vars,
                    });
                }
                if !v.is_finite() {
                    return Err(SdpError::NonFinite);
                }
            }
        }
        for (b, m) in &self.cost_blocks {
            check_sparse(*b, m)?;
        }
        if self.cost_free.iter().any(|v| !v.is_finite()) || !self.cost_offset.is_finite() {
            return Err(SdpError::NonFinite);
        }
        Ok(())
    }

    /// Objective value at a primal point.
    pub fn objective_at(&self, blocks: &[DMatrix<f64>], free: &[f64]) -> f64 {
        let mut v = self.cost_offset;
        for (b, m) in &self.cost_blocks {
            v += m.inner(&blocks[*b]);
        }
        v + self.cost_free.iter().zip(free).map(|(c, w)| c * w).sum::<f64>()
    }

    /// Largest absolute equality violation at a primal point.
    pub fn max_equality_violation(&self, blocks: &[DMatrix<f64>], free: &[f64]) -> f64 {
        self.equalities
            .iter()
            .map(|eq| {
                let lhs: f64 = eq.blocks.iter().map(|(b, m)| m.inner(&blocks[*b])).sum::<f64>()
                    + eq.free.iter().map(|&(i, v)| v * free[i]).sum::<f64>();
                (lhs - eq.rhs).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Same problem with every objective coefficient multiplied by `s`.
    pub fn with_scaled_objective(&self, s: f64) -> SdpProblem {
        let mut out = self.clone();
        out.cost_blocks = out.cost_blocks.iter().map(|(b, m)| (*b, m.scaled(s))).collect();
        out.cost_free.iter_mut().for_each(|c| *c *= s);
        out.cost_offset *= s;
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    /// Stalled short of `tol` but with all residuals below the looser
    /// acceptance threshold.
    NearOptimal,
    Infeasible,
    Unbounded,
    MaxIterations,
    NumericalFailure,
}

impl SdpStatus {
    pub fn is_usable(self) -> bool {
        matches!(self, SdpStatus::Optimal | SdpStatus::NearOptimal)
    }
}

/// Relative residuals of the returned iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    /// `||b - A(X) - B w|| / (1 + ||b||)`
    pub primal: f64,
    /// `||C - A*(y) - Z|| + ||d - B'y||`, relative to `1 + ||C|| + ||d||`
    pub dual: f64,
    /// `|p - d| / (1 + |p| + |d|)`, the larger of the objective gap and
    /// `<X, Z>` measured the same way
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub primal_blocks: Vec<DMatrix<f64>>,
    pub free: Vec<f64>,
    pub dual: Vec<f64>,
    pub dual_slack: Vec<DMatrix<f64>>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub residuals: Residuals,
    pub iterations: usize,
}

impl SdpSolution {
    /// Smallest eigenvalue across primal blocks (diagonal blocks included).
    pub fn min_primal_eigenvalue(&self) -> f64 {
        self.primal_blocks
            .iter()
            .filter(|b| b.nrows() > 0)
            .map(min_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn min_dual_eigenvalue(&self) -> f64 {
        self.dual_slack
            .iter()
            .filter(|b| b.nrows() > 0)
            .map(min_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn report(&self) -> SolveRecord {
        SolveRecord {
            status: self.status,
            objective: self.primal_objective,
            dual_objective: self.dual_objective,
            residuals: self.residuals,
            iterations: self.iterations,
        }
    }
}

/// JSON-friendly summary of one solve.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolveRecord {
    pub status: SdpStatus,
    pub objective: f64,
    pub dual_objective: f64,
    pub residuals: Residuals,
    pub iterations: usize,
}
