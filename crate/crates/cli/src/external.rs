//! Clarabel as an independent solver for exported problems.

use anyhow::{anyhow, Result};
use avgbound::sdp::{BlockKind, SdpProblem};
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct ExternalSolve {
    pub solver: &'static str,
    pub status: String,
    pub objective: f64,
    pub iterations: u32,
}

/// Position of `(i, j)`, `i <= j`, in the column-major upper triangle.
fn triangle_index(i: usize, j: usize) -> usize {
    j * (j + 1) / 2 + i
}

/// Column offsets of each block in the stacked variable vector, followed by
/// the total.
fn layout(p: &SdpProblem) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(p.blocks.len());
    let mut at = 0;
    for b in &p.blocks {
        offsets.push(at);
        at += match *b {
            BlockKind::Psd(n) => n * (n + 1) / 2,
            BlockKind::Diag(n) => n,
        };
    }
    (offsets, at)
}

/// Solves `p` with Clarabel. Matrix blocks are stored as scaled upper
/// triangles, matching Clarabel's PSD triangle cone, so an off-diagonal
/// entry `v` at `(i, j)` contributes `sqrt(2) v` to the linear form.
pub fn solve(p: &SdpProblem) -> Result<ExternalSolve> {
    p.validate()?;
    let (offsets, nblock) = layout(p);
    let nvars = nblock + p.free_vars;
    let coef = |block: usize, i: usize, j: usize, v: f64| -> (usize, f64) {
        match p.blocks[block] {
            BlockKind::Psd(_) if i != j => (offsets[block] + triangle_index(i, j), std::f64::consts::SQRT_2 * v),
            BlockKind::Psd(_) => (offsets[block] + triangle_index(i, i), v),
            BlockKind::Diag(_) => (offsets[block] + i, v),
        }
    };

    let mut q = vec![0.0; nvars];
    for (b, m) in &p.cost_blocks {
        for &(i, j, v) in &m.entries {
            let (col, c) = coef(*b, i, j, v);
            q[col] += c;
        }
    }
    for (k, &c) in p.cost_free.iter().enumerate() {
        q[nblock + k] += c;
    }

    let (mut rows, mut cols, mut vals, mut rhs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut cones = Vec::new();
    for (r, eq) in p.equalities.iter().enumerate() {
        for (b, m) in &eq.blocks {
            for &(i, j, v) in &m.entries {
                let (col, c) = coef(*b, i, j, v);
                rows.push(r);
                cols.push(col);
                vals.push(c);
            }
        }
        for &(k, v) in &eq.free {
            rows.push(r);
            cols.push(nblock + k);
            vals.push(v);
        }
        rhs.push(eq.rhs);
    }
    if !p.equalities.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(p.equalities.len()));
    }

    let mut bounded = 0;
    for (k, &(lo, hi)) in p.free_bounds.iter().enumerate() {
        if lo.is_finite() {
            rows.push(rhs.len());
            cols.push(nblock + k);
            vals.push(-1.0);
            rhs.push(-lo);
            bounded += 1;
        }
        if hi.is_finite() {
            rows.push(rhs.len());
            cols.push(nblock + k);
            vals.push(1.0);
            rhs.push(hi);
            bounded += 1;
        }
    }
    if bounded > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(bounded));
    }

    for (b, kind) in p.blocks.iter().enumerate() {
        let (dim, cone) = match *kind {
            BlockKind::Psd(n) => (n * (n + 1) / 2, SupportedConeT::PSDTriangleConeT(n)),
            BlockKind::Diag(n) => (n, SupportedConeT::NonnegativeConeT(n)),
        };
        if dim == 0 {
            continue;
        }
        for t in 0..dim {
            rows.push(rhs.len());
            cols.push(offsets[b] + t);
            vals.push(-1.0);
            rhs.push(0.0);
        }
        cones.push(cone);
    }

    let a = CscMatrix::new_from_triplets(rhs.len(), nvars, rows, cols, vals);
    let zero = CscMatrix::new_from_triplets(nvars, nvars, vec![], vec![], vec![]);
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-9)
        .tol_gap_rel(1e-9)
        .tol_feas(1e-9)
        .build()
        .map_err(|e| anyhow!("clarabel settings: {e:?}"))?;
    let mut solver = DefaultSolver::new(&zero, &q, &a, &rhs, &cones, settings)
        .map_err(|e| anyhow!("clarabel setup: {e:?}"))?;
    solver.solve();
    let sol = &solver.solution;
    if !matches!(sol.status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
        return Err(anyhow!("clarabel finished with status {:?}", sol.status));
    }
    Ok(ExternalSolve {
        solver: "clarabel",
        status: format!("{:?}", sol.status),
        objective: sol.obj_val + p.cost_offset,
        iterations: sol.iterations,
    })
}
