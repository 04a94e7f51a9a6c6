//! Closed-loop simulation: fixed-step RK4 integration, long-time averages,
//! equilibria, certificate spot checks and amplitude sweeps.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bound::BoundCertificate;
use crate::poly::{dot, Polynomial};
use crate::synthesis::{refine_fixed_eps, Controller, RefineOptions};
use crate::system::{PolySystem, SystemError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("unbounded trajectory: |x| = {norm:e} at t = {t}")]
    Unbounded { t: f64, norm: f64 },
    #[error("controller has {got} inputs, system has {expected}")]
    ControllerInputs { expected: usize, got: usize },
    #[error(transparent)]
    System(#[from] SystemError),
}

const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    /// Final time.
    pub horizon: f64,
    /// Leading fraction of the horizon discarded before averaging.
    pub transient_fraction: f64,
    pub x0: Vec<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1e-2,
            horizon: 3000.0,
            transient_fraction: 0.5,
            x0: vec![-0.3, -0.3, 0.3],
        }
    }
}

impl SimConfig {
    pub fn validate(&self, nstates: usize) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.horizon > self.dt && self.horizon.is_finite()) {
            return bad(format!("horizon {} must exceed dt {}", self.horizon, self.dt));
        }
        if !(0.0..1.0).contains(&self.transient_fraction) {
            return bad(format!(
                "transient_fraction must lie in [0, 1), got {}",
                self.transient_fraction
            ));
        }
        if self.x0.len() != nstates {
            return bad(format!("x0 has {} entries, system has {nstates} states", self.x0.len()));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return bad("x0 must be finite".into());
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn with_x0(&self, x0: Vec<f64>) -> Self {
        SimConfig {
            x0,
            ..self.clone()
        }
    }
}

/// Flat term list for fast repeated evaluation.
#[derive(Debug, Clone)]
struct CompiledPoly {
    terms: Vec<(Vec<u32>, f64)>,
}

impl CompiledPoly {
    fn new(p: &Polynomial) -> Self {
        CompiledPoly {
            terms: p.terms().map(|(m, c)| (m.exponents().to_vec(), c)).collect(),
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (e, c) in &self.terms {
            let mut v = *c;
            for (xi, &k) in x.iter().zip(e) {
                match k {
                    0 => {}
                    1 => v *= xi,
                    2 => v *= xi * xi,
                    _ => v *= xi.powi(k as i32),
                }
            }
            acc += v;
        }
        acc
    }
}

/// Polynomial closed loop `x' = f(x) + g(x) u(x)` with cost `phi(x, u(x))`.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    n: usize,
    field_poly: Vec<Polynomial>,
    cost_poly: Polynomial,
    field: Vec<CompiledPoly>,
    jacobian: Vec<Vec<CompiledPoly>>,
    cost: CompiledPoly,
}

impl ClosedLoop {
    pub fn new(sys: &PolySystem, controller: Option<&Controller>) -> Result<Self, SimError> {
        let u = match controller {
            Some(c) => {
                if c.inputs.len() != sys.ninputs() {
                    return Err(SimError::ControllerInputs {
                        expected: sys.ninputs(),
                        got: c.inputs.len(),
                    });
                }
                c.feedback()
            }
            None => sys.zero_inputs(),
        };
        let field_poly = sys.closed_loop(&u)?;
        let cost_poly = sys.cost_with(&u)?;
        Ok(ClosedLoop {
            n: sys.nstates(),
            field: field_poly.iter().map(CompiledPoly::new).collect(),
            jacobian: field_poly
                .iter()
                .map(|p| p.gradient().iter().map(CompiledPoly::new).collect())
                .collect(),
            cost: CompiledPoly::new(&cost_poly),
            field_poly,
            cost_poly,
        })
    }

    pub fn nstates(&self) -> usize {
        self.n
    }

    pub fn field(&self) -> &[Polynomial] {
        &self.field_poly
    }

    pub fn cost(&self) -> &Polynomial {
        &self.cost_poly
    }

    pub fn eval_field(&self, x: &[f64], out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.field) {
            *o = p.eval(x);
        }
    }

    pub fn eval_cost(&self, x: &[f64]) -> f64 {
        self.cost.eval(x)
    }

    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.jacobian[i][j].eval(x))
    }
}

/// Fixed-step samples `x(k dt)`, `k = 0..=steps`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub nstates: usize,
    states: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len() / self.nstates
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.nstates..(k + 1) * self.nstates]
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

fn rk4_step(cl: &ClosedLoop, x: &mut [f64], dt: f64, scratch: &mut [Vec<f64>; 5]) {
    let n = x.len();
    let [k1, k2, k3, k4, tmp] = scratch;
    cl.eval_field(x, k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    cl.eval_field(tmp, k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    cl.eval_field(tmp, k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    cl.eval_field(tmp, k4);
    for i in 0..n {
        x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

pub fn integrate_closed_loop(cl: &ClosedLoop, cfg: &SimConfig) -> Result<Trajectory, SimError> {
    cfg.validate(cl.nstates())?;
    let n = cl.nstates();
    let steps = cfg.steps();
    let mut states = Vec::with_capacity((steps + 1) * n);
    let mut x = cfg.x0.clone();
    let mut scratch: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    states.extend_from_slice(&x);
    for k in 1..=steps {
        rk4_step(cl, &mut x, cfg.dt, &mut scratch);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(SimError::Unbounded {
                t: k as f64 * cfg.dt,
                norm,
            });
        }
        states.extend_from_slice(&x);
    }
    Ok(Trajectory {
        dt: cfg.dt,
        nstates: n,
        states,
    })
}

/// RK4 trajectory of the closed loop; `u = 0` without a controller.
pub fn integrate(
    sys: &PolySystem,
    controller: Option<&Controller>,
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    integrate_closed_loop(&ClosedLoop::new(sys, controller)?, cfg)
}

/// Window of sample positions (fractional indices) used for averaging.
#[derive(Debug, Clone, Copy)]
struct Window {
    start: f64,
    end: f64,
    periods: usize,
}

/// Picks whole periods of the oscillation inside `[lo, hi]` when there are
/// at least two, using upward crossings of the most active coordinate
/// through its mean. Otherwise the whole range.
fn aligned_window(traj: &Trajectory, lo: usize, hi: usize) -> Window {
    let whole = Window {
        start: lo as f64,
        end: hi as f64,
        periods: 0,
    };
    if hi <= lo + 2 {
        return whole;
    }
    let n = traj.nstates;
    let count = (hi - lo + 1) as f64;
    let mut best = (0, 0.0, 0.0);
    for i in 0..n {
        let mean = (lo..=hi).map(|k| traj.state(k)[i]).sum::<f64>() / count;
        let var = (lo..=hi).map(|k| (traj.state(k)[i] - mean).powi(2)).sum::<f64>() / count;
        if var > best.2 {
            best = (i, mean, var);
        }
    }
    let (coord, level, var) = best;
    if var.sqrt() < 1e-9 {
        return whole;
    }
    let mut crossings = Vec::new();
    for k in lo..hi {
        let a = traj.state(k)[coord] - level;
        let b = traj.state(k + 1)[coord] - level;
        if a < 0.0 && b >= 0.0 {
            crossings.push(k as f64 + a / (a - b));
        }
    }
    if crossings.len() < 2 {
        return whole;
    }
    Window {
        start: crossings[0],
        end: *crossings.last().unwrap(),
        periods: crossings.len() - 1,
    }
}

/// Mean of the piecewise-linear interpolant of `values` over `w`.
fn window_mean(values: &[f64], w: Window) -> f64 {
    // cumulative trapezoid integral in units of samples
    let cum = |s: f64| -> f64 {
        let k = (s.floor() as usize).min(values.len() - 1);
        let theta = s - k as f64;
        let mut acc = 0.0;
        for j in 0..k {
            acc += 0.5 * (values[j] + values[j + 1]);
        }
        if theta > 0.0 && k + 1 < values.len() {
            acc += theta * values[k] + 0.5 * theta * theta * (values[k + 1] - values[k]);
        }
        acc
    };
    let span = w.end - w.start;
    if span <= 0.0 {
        return values[w.start as usize];
    }
    (cum(w.end) - cum(w.start)) / span
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub phi_bar: f64,
    /// `|mean over the last half - mean over the last quarter|`.
    pub convergence_gap: f64,
    pub converged: bool,
    pub terminal: Vec<f64>,
    /// Per-state means over the averaging window.
    pub mean: Vec<f64>,
    pub mean_square: Vec<f64>,
    /// Whole periods averaged over; zero when the state settles.
    pub periods: usize,
    pub stabilized: bool,
    /// Ratio of the RMS state norm over the last quarter to the quarter
    /// before it. Below one while the state decays.
    pub tail_ratio: f64,
}

impl SimReport {
    pub fn oscillatory(&self) -> bool {
        self.periods >= 2
    }
}

pub fn report(cl: &ClosedLoop, traj: &Trajectory, cfg: &SimConfig) -> SimReport {
    let len = traj.len();
    let last = len - 1;
    let phi: Vec<f64> = (0..len).map(|k| cl.eval_cost(traj.state(k))).collect();
    let start = ((cfg.transient_fraction * last as f64).floor() as usize).min(last - 1);
    let w = aligned_window(traj, start, last);
    let phi_bar = window_mean(&phi, w);
    let half = aligned_window(traj, last / 2, last);
    let quarter = aligned_window(traj, 3 * last / 4, last);
    let convergence_gap = (window_mean(&phi, half) - window_mean(&phi, quarter)).abs();
    let n = traj.nstates;
    let mut mean = Vec::with_capacity(n);
    let mut mean_square = Vec::with_capacity(n);
    for i in 0..n {
        let xi: Vec<f64> = (0..len).map(|k| traj.state(k)[i]).collect();
        mean.push(window_mean(&xi, w));
        let sq: Vec<f64> = xi.iter().map(|v| v * v).collect();
        mean_square.push(window_mean(&sq, w));
    }
    let norm2: Vec<f64> = (0..len)
        .map(|k| traj.state(k).iter().map(|v| v * v).sum())
        .collect();
    let q = last / 4;
    let rms = |a: usize, b: usize| (norm2[a..b].iter().sum::<f64>() / (b - a).max(1) as f64).sqrt();
    let tail = rms(last - q, last);
    let before = rms(last - 2 * q, last - q);
    let terminal = traj.last().to_vec();
    let stabilized = terminal.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-3;
    SimReport {
        phi_bar,
        convergence_gap,
        converged: convergence_gap <= 5e-3 * phi_bar.abs() + 1e-9,
        terminal,
        mean,
        mean_square,
        periods: w.periods,
        stabilized,
        tail_ratio: if before > 0.0 { tail / before } else { 0.0 },
    }
}

/// Long-time average of `phi(x, u(x))`. Whole periods are averaged when the
/// state oscillates, which removes the partial-period bias of a plain
/// trailing mean.
pub fn time_average(
    sys: &PolySystem,
    controller: Option<&Controller>,
    cfg: &SimConfig,
) -> Result<SimReport, SimError> {
    let cl = ClosedLoop::new(sys, controller)?;
    let traj = integrate_closed_loop(&cl, cfg)?;
    Ok(report(&cl, &traj, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquilibriumSearch {
    /// Lower corner of the seed grid; one entry per state, or one entry
    /// used for every state.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub step: f64,
    pub newton_tol: f64,
    pub max_iter: usize,
}

impl Default for EquilibriumSearch {
    fn default() -> Self {
        EquilibriumSearch {
            lo: vec![-4.0],
            hi: vec![4.0],
            step: 1.0,
            newton_tol: 1e-10,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub point: Vec<f64>,
    /// `(re, im)` pairs of the Jacobian spectrum.
    pub eigenvalues: Vec<(f64, f64)>,
    pub stable: bool,
    /// `max_i |f_i(x)|`.
    pub residual: f64,
}

const ROOT_RESIDUAL: f64 = 1e-8;
const DEDUP: f64 = 1e-6;

fn newton(cl: &ClosedLoop, seed: &[f64], tol: f64, max_iter: usize) -> Option<Vec<f64>> {
    let n = cl.nstates();
    let mut x = seed.to_vec();
    let mut fx = vec![0.0; n];
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    cl.eval_field(&x, &mut fx);
    for _ in 0..max_iter {
        let r = norm(&fx);
        if r <= tol {
            break;
        }
        let j = cl.jacobian(&x);
        let rhs = nalgebra::DVector::from_iterator(n, fx.iter().map(|v| -v));
        let dx = j.full_piv_lu().solve(&rhs)?;
        // backtrack on the residual
        let mut t = 1.0;
        let mut accepted = false;
        let mut trial = vec![0.0; n];
        let mut ft = vec![0.0; n];
        while t > 1e-6 {
            for i in 0..n {
                trial[i] = x[i] + t * dx[i];
            }
            cl.eval_field(&trial, &mut ft);
            if norm(&ft) < r || t < 2e-6 {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return None;
        }
        let step = norm(&trial.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>());
        x.clone_from(&trial);
        fx.clone_from(&ft);
        if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_NORM) {
            return None;
        }
        if step <= tol * (1.0 + norm(&x)) && norm(&fx) <= ROOT_RESIDUAL {
            break;
        }
    }
    (norm(&fx) <= ROOT_RESIDUAL).then_some(x)
}

fn grid_axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = ((hi - lo) / step).floor() as usize;
    (0..=count).map(|k| lo + k as f64 * step).collect()
}

pub fn find_equilibria_closed_loop(cl: &ClosedLoop, search: &EquilibriumSearch) -> Vec<Equilibrium> {
    let n = cl.nstates();
    let corner = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
    let axes: Vec<Vec<f64>> = (0..n)
        .map(|i| grid_axis(corner(&search.lo, i), corner(&search.hi, i), search.step))
        .collect();
    let total: usize = axes.iter().map(Vec::len).product();
    let seeds: Vec<Vec<f64>> = (0..total)
        .map(|mut idx| {
            axes.iter()
                .map(|a| {
                    let v = a[idx % a.len()];
                    idx /= a.len();
                    v
                })
                .collect()
        })
        .collect();
    let roots: Vec<Vec<f64>> = seeds
        .par_iter()
        .filter_map(|s| newton(cl, s, search.newton_tol, search.max_iter))
        .collect();
    let mut unique: Vec<Vec<f64>> = Vec::new();
    for r in roots {
        if !unique
            .iter()
            .any(|u| u.iter().zip(&r).all(|(a, b)| (a - b).abs() <= DEDUP * (1.0 + a.abs())))
        {
            unique.push(r);
        }
    }
    unique.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    unique
        .into_iter()
        .map(|point| {
            let eig = cl.jacobian(&point).complex_eigenvalues();
            let mut eigenvalues: Vec<(f64, f64)> = eig.iter().map(|z| (z.re, z.im)).collect();
            eigenvalues.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
            let mut fx = vec![0.0; n];
            cl.eval_field(&point, &mut fx);
            Equilibrium {
                stable: eigenvalues.iter().all(|e| e.0 < 0.0),
                eigenvalues,
                residual: fx.iter().fold(0.0f64, |a, b| a.max(b.abs())),
                point,
            }
        })
        .collect()
}

/// Roots of the closed-loop field from damped Newton iterations seeded on a
/// grid, deduplicated, with linear stability from the Jacobian spectrum.
pub fn find_equilibria(
    sys: &PolySystem,
    controller: Option<&Controller>,
    search: &EquilibriumSearch,
) -> Result<Vec<Equilibrium>, SimError> {
    Ok(find_equilibria_closed_loop(&ClosedLoop::new(sys, controller)?, search))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateCheck {
    /// Largest `f . grad V + phi - C` over the samples.
    pub max_h: f64,
    pub at: Vec<f64>,
    pub time: f64,
    pub violated: bool,
}

/// Samples `H = f . grad V + phi - C` along a trajectory. A bound `C`
/// certified by `V` forces `H <= 0` everywhere, so a positive sample beyond
/// `1e-4 (1 + |C|)` exposes a wrong certificate.
pub fn check_certificate(
    v: &Polynomial,
    c: f64,
    sys: &PolySystem,
    controller: Option<&Controller>,
    cfg: &SimConfig,
) -> Result<CertificateCheck, SimError> {
    let cl = ClosedLoop::new(sys, controller)?;
    let h = CompiledPoly::new(&(&dot(cl.field(), &v.gradient()) + cl.cost()));
    let traj = integrate_closed_loop(&cl, cfg)?;
    let mut best = (f64::NEG_INFINITY, 0);
    for k in 0..traj.len() {
        let value = h.eval(traj.state(k)) - c;
        if value > best.0 {
            best = (value, k);
        }
    }
    Ok(CertificateCheck {
        max_h: best.0,
        at: traj.state(best.1).to_vec(),
        time: traj.time(best.1),
        violated: best.0 > 1e-4 * (1.0 + c.abs()),
    })
}

pub fn check_bound(
    cert: &BoundCertificate,
    sys: &PolySystem,
    controller: Option<&Controller>,
    cfg: &SimConfig,
) -> Result<CertificateCheck, SimError> {
    check_certificate(&cert.v, cert.c, sys, controller, cfg)
}

/// Bound columns of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepBounds {
    /// Uncontrolled bound `C_0`.
    pub c0: Option<f64>,
    /// First-order coefficient `C_1` for the swept feedback.
    pub c1: Option<f64>,
    /// Residuals `F_j` offered to the relaxed refinement.
    #[serde(skip)]
    pub residuals: Vec<Polynomial>,
    /// Fixed-amplitude refinement; skipped when absent.
    pub refine: Option<RefineOptions>,
}

impl Default for SweepBounds {
    fn default() -> Self {
        SweepBounds {
            c0: None,
            c1: None,
            residuals: Vec::new(),
            refine: Some(RefineOptions::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub phi_bar: Option<f64>,
    pub converged: bool,
    #[serde(rename = "C_eps")]
    pub c_eps: Option<f64>,
    #[serde(rename = "C_eps_relaxed")]
    pub c_eps_relaxed: Option<f64>,
    #[serde(rename = "C_linear")]
    pub c_linear: Option<f64>,
    pub n_equilibria: usize,
    pub stabilized: bool,
    /// Failures met while filling the row.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub errors: Vec<String>,
}

/// Origin is a linearly stable equilibrium and the simulated state norm is
/// still shrinking at the end of the horizon.
pub fn converges_to_origin(cl: &ClosedLoop, rep: &SimReport) -> bool {
    let n = cl.nstates();
    let origin = vec![0.0; n];
    let mut f0 = vec![0.0; n];
    cl.eval_field(&origin, &mut f0);
    if f0.iter().any(|v| v.abs() > ROOT_RESIDUAL) {
        return false;
    }
    let stable = cl.jacobian(&origin).complex_eigenvalues().iter().all(|z| z.re < 0.0);
    stable && (rep.stabilized || rep.tail_ratio < 1.0)
}

fn sweep_row(
    sys: &PolySystem,
    base: &Controller,
    eps: f64,
    cfg: &SimConfig,
    bounds: &SweepBounds,
    search: &EquilibriumSearch,
) -> SweepRow {
    let ctl = base.with_epsilon(eps);
    let mut row = SweepRow {
        eps,
        phi_bar: None,
        converged: false,
        c_eps: None,
        c_eps_relaxed: None,
        c_linear: bounds.c0.zip(bounds.c1).map(|(c0, c1)| c0 + eps * c1),
        n_equilibria: 0,
        stabilized: false,
        errors: Vec::new(),
    };
    match ClosedLoop::new(sys, Some(&ctl)) {
        Ok(cl) => {
            row.n_equilibria = find_equilibria_closed_loop(&cl, search).len();
            match integrate_closed_loop(&cl, cfg) {
                Ok(traj) => {
                    let rep = report(&cl, &traj, cfg);
                    row.phi_bar = Some(rep.phi_bar);
                    row.converged = rep.converged;
                    row.stabilized = rep.stabilized;
                }
                Err(e) => row.errors.push(format!("simulation: {e}")),
            }
        }
        Err(e) => row.errors.push(format!("closed loop: {e}")),
    }
    if let Some(refine) = &bounds.refine {
        for relax in [false, true] {
            let opts = RefineOptions {
                relax,
                ..refine.clone()
            };
            match refine_fixed_eps(sys, &ctl, &bounds.residuals, &opts) {
                Ok(cert) if relax => row.c_eps_relaxed = Some(cert.c),
                Ok(cert) => row.c_eps = Some(cert.c),
                Err(e) => row.errors.push(format!("refine (relax = {relax}): {e}")),
            }
        }
    }
    for e in &row.errors {
        log::warn!("eps = {eps}: {e}");
    }
    row
}

/// One row per amplitude, computed in parallel. Row failures are recorded
/// in the row and never abort the sweep.
pub fn sweep_eps(
    sys: &PolySystem,
    controller: &Controller,
    eps_list: &[f64],
    cfg: &SimConfig,
    bounds: &SweepBounds,
    search: &EquilibriumSearch,
) -> Vec<SweepRow> {
    eps_list
        .par_iter()
        .map(|&eps| sweep_row(sys, controller, eps, cfg, bounds, search))
        .collect()
}

/// Bisects a monotone predicate on `(lo, hi]` with `pred(lo) = false` and
/// `pred(hi) = true` down to `resolution`; returns the upper end.
pub fn bisect<F: FnMut(f64) -> bool>(mut lo: f64, mut hi: f64, resolution: f64, mut pred: F) -> f64 {
    while hi - lo > resolution {
        let mid = 0.5 * (lo + hi);
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Smallest amplitude whose closed loop converges to the origin.
    pub eps1: Option<f64>,
    /// Smallest amplitude with equilibria besides the origin.
    pub eps2: Option<f64>,
    pub resolution: f64,
}

pub fn stabilizes(sys: &PolySystem, ctl: &Controller, cfg: &SimConfig) -> bool {
    let Ok(cl) = ClosedLoop::new(sys, Some(ctl)) else {
        return false;
    };
    match integrate_closed_loop(&cl, cfg) {
        Ok(traj) => converges_to_origin(&cl, &report(&cl, &traj, cfg)),
        Err(_) => false,
    }
}

pub fn has_extra_equilibria(sys: &PolySystem, ctl: &Controller, search: &EquilibriumSearch) -> bool {
    find_equilibria(sys, Some(ctl), search).is_ok_and(|e| e.len() > 1)
}

/// Locates the first stabilizing amplitude and the first amplitude with
/// extra equilibria between consecutive sweep rows, then refines each by
/// bisection.
pub fn detect_thresholds(
    sys: &PolySystem,
    controller: &Controller,
    rows: &[SweepRow],
    cfg: &SimConfig,
    search: &EquilibriumSearch,
    resolution: f64,
) -> Thresholds {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.eps.partial_cmp(&b.eps).unwrap_or(std::cmp::Ordering::Equal));
    let bracket = |flag: &dyn Fn(&SweepRow) -> bool| {
        sorted
            .windows(2)
            .find(|w| !flag(w[0]) && flag(w[1]))
            .map(|w| (w[0].eps, w[1].eps))
    };
    let eps1 = bracket(&|r: &SweepRow| {
        stabilizes(sys, &controller.with_epsilon(r.eps), cfg)
    })
    .map(|(lo, hi)| bisect(lo, hi, resolution, |e| stabilizes(sys, &controller.with_epsilon(e), cfg)));
    let eps2 = bracket(&|r: &SweepRow| r.n_equilibria > 1).map(|(lo, hi)| {
        bisect(lo, hi, resolution, |e| {
            has_extra_equilibria(sys, &controller.with_epsilon(e), search)
        })
    });
    Thresholds {
        eps1,
        eps2,
        resolution,
    }
}

/// Writes sweep rows as RFC 4180 CSV with the fixed column set.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), csv::Error> {
    #[derive(Serialize)]
    struct Record {
        eps: f64,
        phi_bar: Option<f64>,
        converged: bool,
        #[serde(rename = "C_eps")]
        c_eps: Option<f64>,
        #[serde(rename = "C_eps_relaxed")]
        c_eps_relaxed: Option<f64>,
        #[serde(rename = "C_linear")]
        c_linear: Option<f64>,
        n_equilibria: usize,
        stabilized: bool,
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(Record {
            eps: r.eps,
            phi_bar: r.phi_bar,
            converged: r.converged,
            c_eps: r.c_eps,
            c_eps_relaxed: r.c_eps_relaxed,
            c_linear: r.c_linear,
            n_equilibria: r.n_equilibria,
            stabilized: r.stabilized,
        })?;
    }
    w.flush()?;
    Ok(())
}
