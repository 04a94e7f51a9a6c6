//! Infeasible primal-dual path-following method with Nesterov-Todd scaling
//! and Mehrotra's predictor-corrector.
//!
//! Free variables are kept in the Newton system through an augmented
//! `[[M, B], [B', 0]]` factorization. Boxed free variables are rewritten as
//! nonnegative slacks in an extra diagonal block before the solve.

use std::collections::BTreeMap;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{min_eigenvalue, sym_eigen};

use super::{
    BlockKind, Residuals, SdpError, SdpProblem, SdpSolution, SdpStatus, SymSparse,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    /// Target for the relative primal, dual and gap residuals.
    pub tol: f64,
    /// Residual level accepted as `NearOptimal` when progress stalls.
    pub near_tol: f64,
    pub max_iter: usize,
    /// Threshold on the normalized infeasibility certificates.
    pub infeas_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            near_tol: 1e-6,
            max_iter: 200,
            infeas_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
enum Mat {
    Dense(DMatrix<f64>),
    Diag(DVector<f64>),
}

impl Mat {
    fn zeros(kind: BlockKind) -> Mat {
        match kind {
            BlockKind::Psd(n) => Mat::Dense(DMatrix::zeros(n, n)),
            BlockKind::Diag(n) => Mat::Diag(DVector::zeros(n)),
        }
    }

    fn identity(kind: BlockKind, s: f64) -> Mat {
        match kind {
            BlockKind::Psd(n) => Mat::Dense(DMatrix::identity(n, n) * s),
            BlockKind::Diag(n) => Mat::Diag(DVector::from_element(n, s)),
        }
    }

    fn dot(&self, other: &Mat) -> f64 {
        match (self, other) {
            (Mat::Dense(a), Mat::Dense(b)) => a.dot(b),
            (Mat::Diag(a), Mat::Diag(b)) => a.dot(b),
            _ => unreachable!("block kinds differ"),
        }
    }

    fn norm_sq(&self) -> f64 {
        match self {
            Mat::Dense(a) => a.norm_squared(),
            Mat::Diag(a) => a.norm_squared(),
        }
    }

    fn axpy(&mut self, a: f64, other: &Mat) {
        match (self, other) {
            (Mat::Dense(x), Mat::Dense(y)) => x.zip_apply(y, |p, q| *p += a * q),
            (Mat::Diag(x), Mat::Diag(y)) => x.axpy(a, y, 1.0),
            _ => unreachable!("block kinds differ"),
        }
    }

    fn sub(&self, other: &Mat) -> Mat {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Mat::Dense(a) => a.clone(),
            Mat::Diag(d) => DMatrix::from_diagonal(d),
        }
    }
}

enum Recover {
    Free(usize),
    Lower { lo: f64, slot: usize },
    Upper { hi: f64, slot: usize },
    Fixed(f64),
}

/// Internal problem: original blocks plus an optional slack block, only
/// unbounded free variables, entries mirrored for direct indexing.
struct Std {
    kinds: Vec<BlockKind>,
    n_orig_blocks: usize,
    /// Internal row of each original equality; `None` for dropped empty rows.
    row_map: Vec<Option<usize>>,
    empty_row_infeasible: bool,
    rows: Vec<Vec<(usize, Vec<(usize, usize, f64)>)>>,
    rows_free: Vec<Vec<(usize, f64)>>,
    /// Per dense block: `(row, index into rows[row])` pairs.
    dense_by_block: Vec<Vec<(usize, usize)>>,
    /// Per diagonal block, per position: `(row, value)` pairs.
    diag_cols: Vec<Vec<Vec<(usize, f64)>>>,
    b: DVector<f64>,
    c: Vec<Mat>,
    d: DVector<f64>,
    offset: f64,
    recover: Vec<Recover>,
    unbounded_free: bool,
}

impl Std {
    fn build(p: &SdpProblem) -> Std {
        let mut recover = Vec::with_capacity(p.free_vars);
        let mut nfree = 0;
        let mut nslots = 0;
        let mut bound_rows = Vec::new();
        let mut appears = vec![false; p.free_vars];
        for eq in &p.equalities {
            for &(i, v) in &eq.free {
                if v != 0.0 {
                    appears[i] = true;
                }
            }
        }
        let mut unbounded_free = false;
        for (k, &(lo, hi)) in p.free_bounds.iter().enumerate() {
            let r = match (lo.is_finite(), hi.is_finite()) {
                _ if lo == hi => Recover::Fixed(lo),
                (false, false) => {
                    if appears[k] {
                        nfree += 1;
                        Recover::Free(nfree - 1)
                    } else {
                        if p.cost_free[k] != 0.0 {
                            unbounded_free = true;
                        }
                        Recover::Fixed(0.0)
                    }
                }
                (true, hi_finite) => {
                    let slot = nslots;
                    nslots += 1;
                    if hi_finite {
                        bound_rows.push((slot, nslots, hi - lo));
                        nslots += 1;
                    }
                    Recover::Lower { lo, slot }
                }
                (false, true) => {
                    nslots += 1;
                    Recover::Upper { hi, slot: nslots - 1 }
                }
            };
            recover.push(r);
        }

        let mut kinds = p.blocks.clone();
        let slack_block = if nslots > 0 {
            kinds.push(BlockKind::Diag(nslots));
            Some(kinds.len() - 1)
        } else {
            None
        };

        let full = |kind: BlockKind, m: &SymSparse| -> Vec<(usize, usize, f64)> {
            let mut out = Vec::with_capacity(2 * m.entries.len());
            for &(i, j, v) in &m.entries {
                out.push((i, j, v));
                if i != j && matches!(kind, BlockKind::Psd(_)) {
                    out.push((j, i, v));
                }
            }
            out
        };

        let mut rows = Vec::new();
        let mut rows_free = Vec::new();
        let mut b = Vec::new();
        let mut row_map = Vec::with_capacity(p.equalities.len());
        let mut empty_row_infeasible = false;
        for eq in &p.equalities {
            let mut merged: BTreeMap<usize, SymSparse> = BTreeMap::new();
            for (blk, mat) in &eq.blocks {
                merged
                    .entry(*blk)
                    .or_default()
                    .entries
                    .extend_from_slice(&mat.entries);
            }
            let mut rhs = eq.rhs;
            let mut fr: BTreeMap<usize, f64> = BTreeMap::new();
            let mut slack = SymSparse::new();
            for &(k, a) in &eq.free {
                match recover[k] {
                    Recover::Free(f) => *fr.entry(f).or_insert(0.0) += a,
                    Recover::Lower { lo, slot } => {
                        rhs -= a * lo;
                        slack.push(slot, slot, a);
                    }
                    Recover::Upper { hi, slot } => {
                        rhs -= a * hi;
                        slack.push(slot, slot, -a);
                    }
                    Recover::Fixed(v) => rhs -= a * v,
                }
            }
            if let Some(sb) = slack_block {
                if !slack.is_empty() {
                    merged.insert(sb, slack);
                }
            }
            let mut row = Vec::new();
            for (blk, mut mat) in merged {
                mat.canonicalize();
                if !mat.is_empty() {
                    row.push((blk, full(kinds[blk], &mat)));
                }
            }
            let fr: Vec<(usize, f64)> = fr.into_iter().filter(|e| e.1 != 0.0).collect();
            if row.is_empty() && fr.is_empty() {
                // 0 = rhs carries no information, or no solution at all
                empty_row_infeasible |= rhs != 0.0;
                row_map.push(None);
                continue;
            }
            row_map.push(Some(rows.len()));
            rows.push(row);
            rows_free.push(fr);
            b.push(rhs);
        }
        for &(s, t, width) in &bound_rows {
            let sb = slack_block.expect("bound rows imply a slack block");
            rows.push(vec![(sb, vec![(s, s, 1.0), (t, t, 1.0)])]);
            rows_free.push(Vec::new());
            b.push(width);
        }
        let b = DVector::from_vec(b);

        let mut c: Vec<Mat> = kinds.iter().map(|&k| Mat::zeros(k)).collect();
        for (blk, mat) in &p.cost_blocks {
            add_sparse(&mut c[*blk], mat, 1.0);
        }
        let mut d = DVector::zeros(nfree);
        let mut offset = p.cost_offset;
        for (k, &cost) in p.cost_free.iter().enumerate() {
            match recover[k] {
                Recover::Free(f) => d[f] += cost,
                Recover::Lower { lo, slot } => {
                    offset += cost * lo;
                    if let Some(Mat::Diag(v)) = slack_block.map(|sb| &mut c[sb]) {
                        v[slot] += cost;
                    }
                }
                Recover::Upper { hi, slot } => {
                    offset += cost * hi;
                    if let Some(Mat::Diag(v)) = slack_block.map(|sb| &mut c[sb]) {
                        v[slot] -= cost;
                    }
                }
                Recover::Fixed(v) => offset += cost * v,
            }
        }

        let mut dense_by_block = vec![Vec::new(); kinds.len()];
        let mut diag_cols: Vec<Vec<Vec<(usize, f64)>>> = kinds
            .iter()
            .map(|k| match k {
                BlockKind::Diag(n) => vec![Vec::new(); *n],
                BlockKind::Psd(_) => Vec::new(),
            })
            .collect();
        for (j, row) in rows.iter().enumerate() {
            for (idx, (blk, entries)) in row.iter().enumerate() {
                match kinds[*blk] {
                    BlockKind::Psd(_) => dense_by_block[*blk].push((j, idx)),
                    BlockKind::Diag(_) => {
                        for &(p, _, v) in entries {
                            diag_cols[*blk][p].push((j, v));
                        }
                    }
                }
            }
        }

        Std {
            kinds,
            n_orig_blocks: p.blocks.len(),
            row_map,
            empty_row_infeasible,
            rows,
            rows_free,
            dense_by_block,
            diag_cols,
            b,
            c,
            d,
            offset,
            recover,
            unbounded_free,
        }
    }

    fn m(&self) -> usize {
        self.rows.len()
    }

    fn nfree(&self) -> usize {
        self.d.len()
    }

    fn barrier_dim(&self) -> usize {
        self.kinds.iter().map(|k| k.dim()).sum()
    }

    /// `A(X)`
    fn apply(&self, x: &[Mat]) -> DVector<f64> {
        DVector::from_iterator(
            self.m(),
            self.rows.iter().map(|row| {
                row.iter()
                    .map(|(blk, entries)| match &x[*blk] {
                        Mat::Dense(a) => entries.iter().map(|&(p, q, v)| v * a[(p, q)]).sum(),
                        Mat::Diag(a) => entries.iter().map(|&(p, _, v)| v * a[p]).sum::<f64>(),
                    })
                    .sum::<f64>()
            }),
        )
    }

    /// `A*(y)`
    fn adjoint(&self, y: &DVector<f64>) -> Vec<Mat> {
        let mut out: Vec<Mat> = self.kinds.iter().map(|&k| Mat::zeros(k)).collect();
        for (j, row) in self.rows.iter().enumerate() {
            let yj = y[j];
            if yj == 0.0 {
                continue;
            }
            for (blk, entries) in row {
                match &mut out[*blk] {
                    Mat::Dense(a) => {
                        for &(p, q, v) in entries {
                            a[(p, q)] += yj * v;
                        }
                    }
                    Mat::Diag(a) => {
                        for &(p, _, v) in entries {
                            a[p] += yj * v;
                        }
                    }
                }
            }
        }
        out
    }

    /// `B w`
    fn apply_free(&self, w: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.m(),
            self.rows_free
                .iter()
                .map(|r| r.iter().map(|&(f, a)| a * w[f]).sum::<f64>()),
        )
    }

    /// `B' y`
    fn adjoint_free(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.nfree());
        for (j, r) in self.rows_free.iter().enumerate() {
            for &(f, a) in r {
                out[f] += a * y[j];
            }
        }
        out
    }

    fn row_block_norms(&self) -> Vec<Vec<f64>> {
        let mut norms = vec![vec![0.0; self.kinds.len()]; self.m()];
        for (j, row) in self.rows.iter().enumerate() {
            for (blk, entries) in row {
                norms[j][*blk] = entries.iter().map(|e| e.2 * e.2).sum::<f64>().sqrt();
            }
        }
        norms
    }
}

fn add_sparse(target: &mut Mat, m: &SymSparse, s: f64) {
    match target {
        Mat::Dense(a) => {
            for &(i, j, v) in &m.entries {
                a[(i, j)] += s * v;
                if i != j {
                    a[(j, i)] += s * v;
                }
            }
        }
        Mat::Diag(a) => {
            for &(i, _, v) in &m.entries {
                a[i] += s * v;
            }
        }
    }
}

enum Scaling {
    Dense {
        g: DMatrix<f64>,
        ginv: DMatrix<f64>,
        w: DMatrix<f64>,
        lam: DVector<f64>,
    },
    Diag {
        /// `x / z`
        wsq: DVector<f64>,
    },
}

impl Scaling {
    fn compute(x: &Mat, z: &Mat) -> Option<Scaling> {
        match (x, z) {
            (Mat::Dense(x), Mat::Dense(z)) => {
                let n = x.nrows();
                if n == 0 {
                    let e = DMatrix::zeros(0, 0);
                    return Some(Scaling::Dense {
                        g: e.clone(),
                        ginv: e.clone(),
                        w: e,
                        lam: DVector::zeros(0),
                    });
                }
                let (xv, xu) = sym_eigen(x);
                if xv.iter().any(|&l| !(l > 0.0)) {
                    return None;
                }
                let sq = xv.map(f64::sqrt);
                let xh = &xu * DMatrix::from_diagonal(&sq) * xu.transpose();
                let xh_inv = &xu * DMatrix::from_diagonal(&sq.map(|s| 1.0 / s)) * xu.transpose();
                let (d, u) = sym_eigen(&symmetrize(&(&xh * z * &xh)));
                if d.iter().any(|&l| !(l > 0.0)) {
                    return None;
                }
                let g = &xh * &u * DMatrix::from_diagonal(&d.map(|v| v.powf(-0.25)));
                let ginv = DMatrix::from_diagonal(&d.map(|v| v.powf(0.25))) * u.transpose() * &xh_inv;
                let w = symmetrize(&(&g * g.transpose()));
                Some(Scaling::Dense {
                    g,
                    ginv,
                    w,
                    lam: d.map(f64::sqrt),
                })
            }
            (Mat::Diag(x), Mat::Diag(z)) => {
                if x.iter().chain(z.iter()).any(|&v| !(v > 0.0)) {
                    return None;
                }
                Some(Scaling::Diag {
                    wsq: x.component_div(z),
                })
            }
            _ => unreachable!("block kinds differ"),
        }
    }

    /// `W M W`
    fn sandwich(&self, m: &Mat) -> Mat {
        match (self, m) {
            (Scaling::Dense { w, .. }, Mat::Dense(a)) => Mat::Dense(symmetrize(&(w * a * w))),
            (Scaling::Diag { wsq }, Mat::Diag(a)) => Mat::Diag(wsq.component_mul(a)),
            _ => unreachable!("block kinds differ"),
        }
    }
}

fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

struct Iterate {
    x: Vec<Mat>,
    z: Vec<Mat>,
    y: DVector<f64>,
    w: DVector<f64>,
}

struct Eval {
    rp: DVector<f64>,
    rd: Vec<Mat>,
    rf: DVector<f64>,
    pobj: f64,
    dobj: f64,
    xz: f64,
    relp: f64,
    reld: f64,
    relgap: f64,
}

impl Eval {
    fn merit(&self) -> f64 {
        self.relp.max(self.reld).max(self.relgap)
    }
}

struct Direction {
    dx: Vec<Mat>,
    dz: Vec<Mat>,
    dy: DVector<f64>,
    dw: DVector<f64>,
}

struct Newton {
    /// Equilibrated `D K D`.
    k: DMatrix<f64>,
    d: DVector<f64>,
    lu: nalgebra::FullPivLU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

struct Solver<'a> {
    st: &'a Std,
    opts: &'a SolveOptions,
    norm_b: f64,
    norm_c: f64,
}

impl<'a> Solver<'a> {
    fn evaluate(&self, it: &Iterate) -> Eval {
        let st = self.st;
        let rp = &st.b - st.apply(&it.x) - st.apply_free(&it.w);
        let aty = st.adjoint(&it.y);
        let rd: Vec<Mat> = st
            .c
            .iter()
            .zip(aty.iter().zip(&it.z))
            .map(|(c, (a, z))| {
                let mut r = c.sub(a);
                r.axpy(-1.0, z);
                r
            })
            .collect();
        let rf = &st.d - st.adjoint_free(&it.y);
        let pobj: f64 =
            st.c.iter().zip(&it.x).map(|(c, x)| c.dot(x)).sum::<f64>() + st.d.dot(&it.w);
        let dobj = st.b.dot(&it.y);
        let xz: f64 = it.x.iter().zip(&it.z).map(|(x, z)| x.dot(z)).sum();
        let relp = rp.norm() / (1.0 + self.norm_b);
        let reld = (rd.iter().map(Mat::norm_sq).sum::<f64>() + rf.norm_squared()).sqrt()
            / (1.0 + self.norm_c);
        let denom = 1.0 + pobj.abs() + dobj.abs();
        let relgap = ((pobj - dobj).abs().max(xz.abs())) / denom;
        Eval {
            rp,
            rd,
            rf,
            pobj,
            dobj,
            xz,
            relp,
            reld,
            relgap,
        }
    }

    fn initial_point(&self) -> Iterate {
        let st = self.st;
        let norms = st.row_block_norms();
        let mut x = Vec::new();
        let mut z = Vec::new();
        for (k, &kind) in st.kinds.iter().enumerate() {
            let n = kind.dim() as f64;
            let sqn = n.sqrt().max(1.0);
            let mut xi: f64 = 10f64.max(sqn);
            let mut eta: f64 = 10f64.max(sqn);
            for j in 0..st.m() {
                let a = norms[j][k];
                xi = xi.max(sqn * (1.0 + st.b[j].abs()) / (1.0 + a));
                eta = eta.max(a);
            }
            eta = eta.max(st.c[k].norm_sq().sqrt());
            x.push(Mat::identity(kind, xi));
            z.push(Mat::identity(kind, eta));
        }
        Iterate {
            x,
            z,
            y: DVector::zeros(st.m()),
            w: DVector::zeros(st.nfree()),
        }
    }

    fn factor(&self, scales: &[Scaling]) -> Option<Newton> {
        let st = self.st;
        let m = st.m();
        let nf = st.nfree();
        let mut k = DMatrix::zeros(m + nf, m + nf);
        for (blk, scale) in scales.iter().enumerate() {
            match scale {
                Scaling::Dense { w, .. } => {
                    let list = &st.dense_by_block[blk];
                    for (a, &(ri, ii)) in list.iter().enumerate() {
                        let ei = &st.rows[ri][ii].1;
                        for &(rj, ij) in &list[a..] {
                            let ej = &st.rows[rj][ij].1;
                            let mut s = 0.0;
                            for &(p, q, v) in ei {
                                for &(r, t, u) in ej {
                                    s += v * u * w[(p, r)] * w[(t, q)];
                                }
                            }
                            k[(ri.min(rj), ri.max(rj))] += s;
                        }
                    }
                }
                Scaling::Diag { wsq } => {
                    for (p, col) in st.diag_cols[blk].iter().enumerate() {
                        let wp = wsq[p];
                        for (a, &(ri, vi)) in col.iter().enumerate() {
                            for &(rj, vj) in &col[a..] {
                                k[(ri.min(rj), ri.max(rj))] += vi * vj * wp;
                            }
                        }
                    }
                }
            }
        }
        for i in 0..m {
            for j in 0..i {
                k[(i, j)] = k[(j, i)];
            }
        }
        for (j, r) in st.rows_free.iter().enumerate() {
            for &(f, a) in r {
                k[(j, m + f)] += a;
                k[(m + f, j)] += a;
            }
        }
        if k.iter().any(|v: &f64| !v.is_finite()) {
            return None;
        }
        // Symmetric Ruiz equilibration: rows and columns of D K D end up
        // with unit max-norm, which the pivoting alone cannot achieve when
        // the scaled blocks span many orders of magnitude.
        let n = m + nf;
        let mut d = DVector::from_element(n, 1.0);
        let mut ks = k.clone();
        for _ in 0..10 {
            let r = DVector::from_fn(n, |i, _| {
                let mx = ks.row(i).amax();
                if mx > 0.0 {
                    1.0 / mx.sqrt()
                } else {
                    1.0
                }
            });
            if r.iter().all(|&v| (v - 1.0).abs() < 1e-3) {
                break;
            }
            for j in 0..n {
                for i in 0..n {
                    ks[(i, j)] *= r[i] * r[j];
                }
            }
            d.component_mul_assign(&r);
        }
        let delta = 1e-15;
        let mut reg = ks.clone();
        for i in 0..m {
            reg[(i, i)] += delta;
        }
        for i in m..n {
            reg[(i, i)] -= delta;
        }
        Some(Newton {
            k: ks,
            d,
            lu: reg.full_piv_lu(),
        })
    }

    /// Solves `K x = rhs` through `(D K D) (D^-1 x) = D rhs` with
    /// iterative refinement against the unregularized matrix.
    fn solve_kkt(&self, nt: &Newton, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        if rhs.is_empty() {
            return Some(DVector::zeros(0));
        }
        let b = rhs.component_mul(&nt.d);
        let mut sol = nt.lu.solve(&b)?;
        let mut res = &b - &nt.k * &sol;
        let mut rnorm = res.norm();
        for _ in 0..8 {
            if rnorm <= 1e-15 * (1.0 + b.norm()) {
                break;
            }
            let next = &sol + nt.lu.solve(&res)?;
            let nres = &b - &nt.k * &next;
            let nnorm = nres.norm();
            if !(nnorm < 0.5 * rnorm) {
                if nnorm < rnorm {
                    sol = next;
                }
                break;
            }
            sol = next;
            res = nres;
            rnorm = nnorm;
        }
        let sol = sol.component_mul(&nt.d);
        if sol.iter().all(|v| v.is_finite()) {
            Some(sol)
        } else {
            None
        }
    }

    fn direction(
        &self,
        nt: &Newton,
        scales: &[Scaling],
        ev: &Eval,
        rc: &[Mat],
    ) -> Option<Direction> {
        let st = self.st;
        let m = st.m();
        let t: Vec<Mat> = rc
            .iter()
            .zip(scales.iter().zip(&ev.rd))
            .map(|(r, (s, rd))| r.sub(&s.sandwich(rd)))
            .collect();
        let h = &ev.rp - st.apply(&t);
        let mut rhs = DVector::zeros(m + st.nfree());
        rhs.rows_mut(0, m).copy_from(&h);
        rhs.rows_mut(m, st.nfree()).copy_from(&ev.rf);
        let sol = self.solve_kkt(nt, &rhs)?;
        let mut dy = sol.rows(0, m).into_owned();
        let mut dw = sol.rows(m, st.nfree()).into_owned();
        let mut dz: Vec<Mat> = ev.rd.iter().zip(&st.adjoint(&dy)).map(|(r, a)| r.sub(a)).collect();
        let mut dx: Vec<Mat> = rc
            .iter()
            .zip(scales.iter().zip(&dz))
            .map(|(r, (s, d))| r.sub(&s.sandwich(d)))
            .collect();
        // The Schur complement is formed in floating point, so the primal
        // linearization is only met to its rounding level. Correct against
        // the unreduced equations.
        let mut err = (&ev.rp - st.apply(&dx) - st.apply_free(&dw)).norm();
        for _ in 0..3 {
            if err <= 1e-14 * (1.0 + ev.rp.norm()) {
                break;
            }
            let r1 = &ev.rp - st.apply(&dx) - st.apply_free(&dw);
            let r2 = &ev.rf - st.adjoint_free(&dy);
            let mut rhs = DVector::zeros(m + st.nfree());
            rhs.rows_mut(0, m).copy_from(&r1);
            rhs.rows_mut(m, st.nfree()).copy_from(&r2);
            let corr = self.solve_kkt(nt, &rhs)?;
            let cy = corr.rows(0, m).into_owned();
            let cw = corr.rows(m, st.nfree()).into_owned();
            let acy = st.adjoint(&cy);
            let ndy = &dy + &cy;
            let ndw = &dw + &cw;
            let ndz: Vec<Mat> = dz.iter().zip(&acy).map(|(d, a)| d.sub(a)).collect();
            let ndx: Vec<Mat> = rc
                .iter()
                .zip(scales.iter().zip(&ndz))
                .map(|(r, (s, d))| r.sub(&s.sandwich(d)))
                .collect();
            let nerr = (&ev.rp - st.apply(&ndx) - st.apply_free(&ndw)).norm();
            if !(nerr < err) {
                break;
            }
            dy = ndy;
            dw = ndw;
            dz = ndz;
            dx = ndx;
            err = nerr;
        }
        if log::log_enabled!(log::Level::Trace) {
            let lin = (&ev.rp - st.apply(&dx) - st.apply_free(&dw)).norm();
            log::trace!("  direction residual {lin:.2e} (rp {:.2e})", ev.rp.norm());
        }
        Some(Direction { dx, dz, dy, dw })
    }

    fn run(&self) -> (Iterate, Eval, SdpStatus, usize) {
        let st = self.st;
        let opts = self.opts;
        let nbar = st.barrier_dim().max(1) as f64;
        let mut it = self.initial_point();
        let mut best: Option<(Iterate, f64)> = None;
        let mut best_iter = 0;
        let mut stalls = 0;

        for iter in 0..=opts.max_iter {
            let ev = self.evaluate(&it);
            let merit = ev.merit();
            debug!(
                "iter {iter:3} pobj {:+.8e} dobj {:+.8e} relp {:.1e} reld {:.1e} gap {:.1e}",
                ev.pobj + st.offset,
                ev.dobj + st.offset,
                ev.relp,
                ev.reld,
                ev.relgap
            );
            if !merit.is_finite() {
                return self.finish_failure(best, it, ev, iter, SdpStatus::NumericalFailure);
            }
            if ev.relp <= opts.tol && ev.reld <= opts.tol && ev.relgap <= opts.tol {
                return (it, ev, SdpStatus::Optimal, iter);
            }
            if let Some(status) = self.certificate(&it, &ev, opts.infeas_tol) {
                return (it, ev, status, iter);
            }
            if best.as_ref().is_none_or(|b| merit < b.1) {
                best = Some((clone_iterate(&it), merit));
                best_iter = iter;
            }
            if iter == opts.max_iter {
                return self.finish_failure(best, it, ev, iter, SdpStatus::MaxIterations);
            }
            if iter - best_iter > 40 || stalls >= 4 {
                return self.finish_failure(best, it, ev, iter, SdpStatus::NumericalFailure);
            }

            let mu = ev.xz / nbar;
            let scales: Option<Vec<Scaling>> = it
                .x
                .iter()
                .zip(&it.z)
                .map(|(x, z)| Scaling::compute(x, z))
                .collect();
            let Some(scales) = scales else {
                debug!("scaling failed");
                return self.finish_failure(best, it, ev, iter, SdpStatus::NumericalFailure);
            };
            let Some(nt) = self.factor(&scales) else {
                debug!("factorization failed");
                return self.finish_failure(best, it, ev, iter, SdpStatus::NumericalFailure);
            };

            let rc_pred: Vec<Mat> = it
                .x
                .iter()
                .map(|x| {
                    let mut r = x.clone();
                    r.axpy(-2.0, x);
                    r
                })
                .collect();
            let Some(pred) = self.direction(&nt, &scales, &ev, &rc_pred) else {
                return self.finish_failure(best, it, ev, iter, SdpStatus::NumericalFailure);
            };
            let (ap, ad) = self.step_lengths(&scales, &it, &pred);
            let ap_aff = ap.min(1.0);
            let ad_aff = ad.min(1.0);
            let mu_aff: f64 = it
                .x
                .iter()
                .zip(&it.z)
                .zip(pred.dx.iter().zip(&pred.dz))
                .map(|((x, z), (dx, dz))| {
                    let mut xn = x.clone();
                    xn.axpy(ap_aff, dx);
                    let mut zn = z.clone();
                    zn.axpy(ad_aff, dz);
                    xn.dot(&zn)
                })
                .sum::<f64>()
                / nbar;
            let ratio = (mu_aff / mu).clamp(0.0, 1.0);
            let expon = (3.0 * ap_aff.min(ad_aff).powi(2)).max(1.0);
            let sigma = ratio.powf(expon);

            let rc_corr: Vec<Mat> = scales
                .iter()
                .enumerate()
                .map(|(k, s)| corrector_rhs(s, &it.x[k], &it.z[k], &pred.dx[k], &pred.dz[k], sigma * mu))
                .collect();
            let Some(dir) = self.direction(&nt, &scales, &ev, &rc_corr) else {
                return self.finish_failure(best, it, ev, iter, SdpStatus::NumericalFailure);
            };
            let (ap, ad) = self.step_lengths(&scales, &it, &dir);
            let gamma = 0.9 + 0.09 * ap_aff.min(ad_aff);
            let ap = (gamma * ap).min(1.0);
            let ad = (gamma * ad).min(1.0);
            debug!("  sigma {sigma:.2e} steps {ap:.3} {ad:.3} mu {mu:.2e}");
            if ap < 1e-10 && ad < 1e-10 {
                stalls += 1;
            } else {
                stalls = 0;
            }
            for (x, dx) in it.x.iter_mut().zip(&dir.dx) {
                x.axpy(ap, dx);
            }
            it.w.axpy(ap, &dir.dw, 1.0);
            for (z, dz) in it.z.iter_mut().zip(&dir.dz) {
                z.axpy(ad, dz);
            }
            it.y.axpy(ad, &dir.dy, 1.0);
        }
        unreachable!("loop returns at max_iter")
    }

    /// Normalized Farkas-type certificates from the current iterate.
    fn certificate(&self, it: &Iterate, ev: &Eval, tol: f64) -> Option<SdpStatus> {
        let st = self.st;
        if ev.dobj > 0.0 {
            // A*(y) + Z = C - Rd and B'y = d - rf
            let ray: f64 = st
                .c
                .iter()
                .zip(&ev.rd)
                .map(|(c, r)| c.sub(r).norm_sq())
                .sum::<f64>()
                + (&st.d - &ev.rf).norm_squared();
            if ray.sqrt() / ev.dobj < tol {
                return Some(SdpStatus::Infeasible);
            }
        }
        if ev.pobj < 0.0 {
            let ray = (&st.b - &ev.rp).norm();
            if ray / -ev.pobj < tol {
                return Some(SdpStatus::Unbounded);
            }
        }
        let _ = it;
        None
    }

    fn finish_failure(
        &self,
        best: Option<(Iterate, f64)>,
        it: Iterate,
        ev: Eval,
        iter: usize,
        status: SdpStatus,
    ) -> (Iterate, Eval, SdpStatus, usize) {
        if let Some(s) = self.certificate(&it, &ev, self.opts.infeas_tol.max(1e-6)) {
            return (it, ev, s, iter);
        }
        if let Some((b, merit)) = best {
            if merit <= self.opts.near_tol {
                let ev = self.evaluate(&b);
                let status = if ev.merit() <= self.opts.tol {
                    SdpStatus::Optimal
                } else {
                    SdpStatus::NearOptimal
                };
                return (b, ev, status, iter);
            }
        }
        (it, ev, status, iter)
    }

    fn step_lengths(&self, scales: &[Scaling], it: &Iterate, dir: &Direction) -> (f64, f64) {
        let mut ap = f64::INFINITY;
        let mut ad = f64::INFINITY;
        for (k, s) in scales.iter().enumerate() {
            match (s, &it.x[k], &it.z[k], &dir.dx[k], &dir.dz[k]) {
                (Scaling::Dense { g, ginv, lam, .. }, _, _, Mat::Dense(dx), Mat::Dense(dz)) => {
                    if lam.is_empty() {
                        continue;
                    }
                    let n = lam.len();
                    let sx = ginv * dx * ginv.transpose();
                    let sz = g.transpose() * dz * g;
                    let scaled = |a: &DMatrix<f64>| {
                        DMatrix::from_fn(n, n, |i, j| {
                            0.5 * (a[(i, j)] + a[(j, i)]) / (lam[i] * lam[j]).sqrt()
                        })
                    };
                    ap = ap.min(max_step(min_eigenvalue(&scaled(&sx))));
                    ad = ad.min(max_step(min_eigenvalue(&scaled(&sz))));
                }
                (Scaling::Diag { .. }, Mat::Diag(x), Mat::Diag(z), Mat::Diag(dx), Mat::Diag(dz)) => {
                    for p in 0..x.len() {
                        if dx[p] < 0.0 {
                            ap = ap.min(-x[p] / dx[p]);
                        }
                        if dz[p] < 0.0 {
                            ad = ad.min(-z[p] / dz[p]);
                        }
                    }
                }
                _ => unreachable!("block kinds differ"),
            }
        }
        (ap, ad)
    }
}

fn max_step(lmin: f64) -> f64 {
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

fn corrector_rhs(s: &Scaling, x: &Mat, z: &Mat, dx: &Mat, dz: &Mat, target: f64) -> Mat {
    match (s, x, z, dx, dz) {
        (Scaling::Dense { g, ginv, lam, .. }, _, _, Mat::Dense(dx), Mat::Dense(dz)) => {
            let n = lam.len();
            let sx = ginv * dx * ginv.transpose();
            let sz = g.transpose() * dz * g;
            let mut r = -(&sx * &sz + &sz * &sx);
            for i in 0..n {
                r[(i, i)] += 2.0 * target - 2.0 * lam[i] * lam[i];
            }
            let q = DMatrix::from_fn(n, n, |i, j| {
                0.5 * (r[(i, j)] + r[(j, i)]) / (lam[i] + lam[j])
            });
            Mat::Dense(symmetrize(&(g * q * g.transpose())))
        }
        (Scaling::Diag { .. }, Mat::Diag(x), Mat::Diag(z), Mat::Diag(dx), Mat::Diag(dz)) => {
            Mat::Diag(DVector::from_fn(x.len(), |p, _| {
                (target - x[p] * z[p] - dx[p] * dz[p]) / z[p]
            }))
        }
        _ => unreachable!("block kinds differ"),
    }
}

fn clone_iterate(it: &Iterate) -> Iterate {
    Iterate {
        x: it.x.clone(),
        z: it.z.clone(),
        y: it.y.clone(),
        w: it.w.clone(),
    }
}

/// Solves `problem` to the tolerances in `opts`.
pub fn solve(problem: &SdpProblem, opts: &SolveOptions) -> Result<SdpSolution, SdpError> {
    problem.validate()?;
    let st = Std::build(problem);
    let norm_b = st.b.norm();
    let norm_c = (st.c.iter().map(Mat::norm_sq).sum::<f64>() + st.d.norm_squared()).sqrt();
    let solver = Solver {
        st: &st,
        opts,
        norm_b,
        norm_c,
    };

    let (it, ev, status, iterations) = if st.empty_row_infeasible || st.unbounded_free {
        let it = solver.initial_point();
        let ev = solver.evaluate(&it);
        let status = if st.empty_row_infeasible {
            SdpStatus::Infeasible
        } else {
            SdpStatus::Unbounded
        };
        (it, ev, status, 0)
    } else {
        solver.run()
    };

    let slack = if st.kinds.len() > st.n_orig_blocks {
        match &it.x[st.n_orig_blocks] {
            Mat::Diag(v) => Some(v.clone()),
            Mat::Dense(_) => None,
        }
    } else {
        None
    };
    let free = st
        .recover
        .iter()
        .map(|r| match *r {
            Recover::Free(f) => it.w[f],
            Recover::Lower { lo, slot } => lo + slack.as_ref().map_or(0.0, |s| s[slot]),
            Recover::Upper { hi, slot } => hi - slack.as_ref().map_or(0.0, |s| s[slot]),
            Recover::Fixed(v) => v,
        })
        .collect();

    Ok(SdpSolution {
        status,
        primal_blocks: it.x[..st.n_orig_blocks].iter().map(Mat::to_dense).collect(),
        free,
        dual: st.row_map.iter().map(|r| r.map_or(0.0, |j| it.y[j])).collect(),
        dual_slack: it.z[..st.n_orig_blocks].iter().map(Mat::to_dense).collect(),
        primal_objective: ev.pobj + st.offset,
        dual_objective: ev.dobj + st.offset,
        residuals: Residuals {
            primal: ev.relp,
            dual: ev.reld,
            gap: ev.relgap,
        },
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::Equality;

    fn sparse(entries: &[(usize, usize, f64)]) -> SymSparse {
        let mut s = SymSparse::new();
        for &(i, j, v) in entries {
            s.push(i, j, v);
        }
        s
    }

    #[test]
    fn scalar_lp() {
        // min x  s.t. x = 1, x >= 0
        let mut p = SdpProblem::new(vec![BlockKind::Psd(1)], 0);
        p.cost_blocks.push((0, sparse(&[(0, 0, 1.0)])));
        p.equalities.push(Equality {
            blocks: vec![(0, sparse(&[(0, 0, 1.0)]))],
            free: vec![],
            rhs: 1.0,
        });
        let s = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.primal_objective - 1.0).abs() < 1e-7);
    }

    #[test]
    fn trace_with_fixed_diagonal() {
        // min tr(X)  s.t. X_ii = 1
        let mut p = SdpProblem::new(vec![BlockKind::Psd(3)], 0);
        p.cost_blocks
            .push((0, sparse(&[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)])));
        for i in 0..3 {
            p.equalities.push(Equality {
                blocks: vec![(0, sparse(&[(i, i, 1.0)]))],
                free: vec![],
                rhs: 1.0,
            });
        }
        let s = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.primal_objective - 3.0).abs() < 1e-7);
    }

    #[test]
    fn free_variable_minimizes_eigenvalue() {
        // max t s.t. A - t I = X PSD, i.e. min -t; optimum is lambda_min(A)
        let a = [[2.0, 1.0], [1.0, 3.0]];
        let mut p = SdpProblem::new(vec![BlockKind::Psd(2)], 1);
        p.cost_free[0] = -1.0;
        for i in 0..2 {
            for j in i..2 {
                // off-diagonal entries count twice in <A, X>
                let (t, w) = if i == j { (1.0, 1.0) } else { (0.0, 2.0) };
                p.equalities.push(Equality {
                    blocks: vec![(0, sparse(&[(i, j, 1.0)]))],
                    free: vec![(0, t)],
                    rhs: w * a[i][j],
                });
            }
        }
        let s = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        let lmin = (5.0 - 5f64.sqrt()) / 2.0;
        assert!((s.free[0] - lmin).abs() < 1e-6, "{}", s.free[0]);
    }

    #[test]
    fn boxed_free_variable_hits_bound() {
        // min -w  s.t. w + x = 10, x >= 0, w in [-1, 2]
        let mut p = SdpProblem::new(vec![BlockKind::Diag(1)], 1);
        p.cost_free[0] = -1.0;
        p.set_bounds(0, -1.0, 2.0);
        p.equalities.push(Equality {
            blocks: vec![(0, sparse(&[(0, 0, 1.0)]))],
            free: vec![(0, 1.0)],
            rhs: 10.0,
        });
        let s = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Optimal);
        assert!((s.free[0] - 2.0).abs() < 1e-6);
        assert!((s.primal_objective + 2.0).abs() < 1e-6);
    }

    #[test]
    fn detects_infeasible() {
        // x = -1 with x >= 0
        let mut p = SdpProblem::new(vec![BlockKind::Psd(1)], 0);
        p.cost_blocks.push((0, sparse(&[(0, 0, 1.0)])));
        p.equalities.push(Equality {
            blocks: vec![(0, sparse(&[(0, 0, 1.0)]))],
            free: vec![],
            rhs: -1.0,
        });
        let s = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Infeasible);
    }

    #[test]
    fn detects_unbounded() {
        // min -x11 s.t. x22 = 1
        let mut p = SdpProblem::new(vec![BlockKind::Psd(2)], 0);
        p.cost_blocks.push((0, sparse(&[(0, 0, -1.0)])));
        p.equalities.push(Equality {
            blocks: vec![(0, sparse(&[(1, 1, 1.0)]))],
            free: vec![],
            rhs: 1.0,
        });
        let s = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Unbounded);
    }

    #[test]
    fn unconstrained_free_cost_is_unbounded() {
        let mut p = SdpProblem::new(vec![BlockKind::Psd(1)], 1);
        p.cost_free[0] = 1.0;
        let s = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(s.status, SdpStatus::Unbounded);
    }
}
