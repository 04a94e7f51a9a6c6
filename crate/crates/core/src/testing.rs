//! Random problem generators for the randomized test suites.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::poly::{monomial_basis, Polynomial};
use crate::sdp::{BlockKind, Equality, SdpProblem, SdpSolution, SymSparse};

/// Polynomial with `terms` random monomials of degree at most `degree` and
/// coefficients in `[-1, 1]`.
pub fn random_polynomial<R: Rng>(rng: &mut R, nvars: usize, degree: u32, terms: usize) -> Polynomial {
    let basis = monomial_basis(nvars, degree);
    let mut p = Polynomial::zero(nvars);
    for _ in 0..terms {
        let m = basis[rng.gen_range(0..basis.len())].clone();
        p.add_term(m, rng.gen_range(-1.0..1.0));
    }
    p
}

fn random_sym(rng: &mut ChaCha8Rng, n: usize, density: f64) -> SymSparse {
    let mut s = SymSparse::new();
    for i in 0..n {
        for j in i..n {
            if rng.gen::<f64>() < density {
                s.push(i, j, rng.gen_range(-1.0..1.0));
            }
        }
    }
    s
}

fn random_pd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &g * g.transpose() + DMatrix::identity(n, n) * 0.5
}

/// Random SDP with a strictly feasible primal point and dual point built in,
/// so it has a finite optimum.
pub fn random_feasible_sdp(seed: u64) -> SdpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nblocks = rng.gen_range(1..=3);
    let mut blocks = Vec::new();
    for _ in 0..nblocks {
        let n = rng.gen_range(1..=6);
        blocks.push(if rng.gen_bool(0.25) {
            BlockKind::Diag(n)
        } else {
            BlockKind::Psd(n)
        });
    }
    let nfree = rng.gen_range(0..=2);
    let m = rng.gen_range(nfree + 1..=12);
    let x0: Vec<DMatrix<f64>> = blocks
        .iter()
        .map(|b| match *b {
            BlockKind::Psd(n) => random_pd(&mut rng, n),
            BlockKind::Diag(n) => DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| {
                rng.gen_range(0.5..2.0)
            })),
        })
        .collect();
    let z0: Vec<DMatrix<f64>> = blocks
        .iter()
        .map(|b| match *b {
            BlockKind::Psd(n) => random_pd(&mut rng, n),
            BlockKind::Diag(n) => DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |_, _| {
                rng.gen_range(0.5..2.0)
            })),
        })
        .collect();
    let w0: Vec<f64> = (0..nfree).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y0: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut p = SdpProblem::new(blocks.clone(), nfree);
    let mut cost: Vec<DMatrix<f64>> = z0.clone();
    let mut d = vec![0.0; nfree];
    for &yj in &y0 {
        let mut eq = Equality::default();
        for (k, kind) in blocks.iter().enumerate() {
            let mut a = random_sym(&mut rng, kind.dim(), 0.6);
            if matches!(kind, BlockKind::Diag(_)) {
                a.entries.retain(|e| e.0 == e.1);
            }
            a.canonicalize();
            if !a.is_empty() {
                cost[k] += a.to_dense(kind.dim()) * yj;
                eq.blocks.push((k, a));
            }
        }
        for (f, df) in d.iter_mut().enumerate() {
            let a = rng.gen_range(-1.0..1.0);
            eq.free.push((f, a));
            *df += a * yj;
        }
        let lhs: f64 = eq.blocks.iter().map(|(k, a)| a.inner(&x0[*k])).sum::<f64>()
            + eq.free.iter().map(|&(f, a)| a * w0[f]).sum::<f64>();
        eq.rhs = lhs;
        p.equalities.push(eq);
    }
    for (k, c) in cost.iter().enumerate() {
        let mut s = SymSparse::new();
        for i in 0..c.nrows() {
            for jj in i..c.ncols() {
                if matches!(blocks[k], BlockKind::Diag(_)) && i != jj {
                    continue;
                }
                s.push(i, jj, c[(i, jj)]);
            }
        }
        s.canonicalize();
        p.cost_blocks.push((k, s));
    }
    p.cost_free = d;
    p
}

/// KKT residuals `(primal, dual, gap)` of `s`, recomputed from the problem
/// data rather than taken from the solver.
pub fn kkt_residuals(p: &SdpProblem, s: &SdpSolution) -> (f64, f64, f64) {
    let primal = p.max_equality_violation(&s.primal_blocks, &s.free)
        / (1.0 + p.equalities.iter().map(|e| e.rhs.abs()).fold(0.0, f64::max));
    let mut dual: f64 = 0.0;
    for (k, kind) in p.blocks.iter().enumerate() {
        let n = kind.dim();
        let mut r = DMatrix::zeros(n, n);
        for (b, c) in &p.cost_blocks {
            if *b == k {
                r += c.to_dense(n);
            }
        }
        for (eq, &y) in p.equalities.iter().zip(&s.dual) {
            for (b, a) in &eq.blocks {
                if *b == k {
                    r -= a.to_dense(n) * y;
                }
            }
        }
        r -= &s.dual_slack[k];
        dual = dual.max(r.amax());
    }
    for f in 0..p.free_vars {
        let mut r = p.cost_free[f];
        for (eq, &y) in p.equalities.iter().zip(&s.dual) {
            for &(g, a) in &eq.free {
                if g == f {
                    r -= a * y;
                }
            }
        }
        dual = dual.max(r.abs());
    }
    let gap = (s.primal_objective - s.dual_objective).abs()
        / (1.0 + s.primal_objective.abs() + s.dual_objective.abs());
    (primal, dual, gap)
}
