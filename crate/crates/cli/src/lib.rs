//! Command-line front end: each subcommand loads a system file, runs one
//! library operation and writes a JSON artifact that embeds the tool version
//! and every resolved option.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use avgbound::bound::{
    attractor_certificate, lower_bound, system_bound_program, upper_bound, AttractorCertificate,
    BallRestriction, BoundCertificate, BoundKind, BoundOptions,
};
use avgbound::config::{load_config, LoadedSystem, SystemConfig};
use avgbound::sdp::{self, export_sdpa, import_sdpa, lift_free_vars, SolveOptions, SolveRecord};
use avgbound::sim::{
    detect_thresholds, find_equilibria, integrate, report, sweep_eps, write_sweep_csv, ClosedLoop,
    Equilibrium, EquilibriumSearch, SimConfig, SimReport, SweepBounds, SweepRow, Thresholds,
};
use avgbound::sos::MultiplierSign;
use avgbound::synthesis::{
    assemble, refine_fixed_eps, step, step_with_feedback, Controller, ExpansionState,
    PredictedBound, RefineOptions, StepOptions, StepResult,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

#[cfg(feature = "external-solver")]
pub mod external;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Objective agreement required between the internal and external solvers.
pub const EXTERNAL_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "avgbound", version, about = "Bounds on long-time averages and small-feedback control synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Upper (and optionally lower) bound on the uncontrolled average cost.
    Bound(BoundArgs),
    /// Order-by-order controller synthesis.
    Synth(SynthArgs),
    /// Bound for a controller at a fixed amplitude.
    Refine(RefineArgs),
    /// Simulations and bounds over a range of amplitudes.
    Sweep(SweepArgs),
    /// Long-time average and equilibria of one closed loop.
    Simulate(SimulateArgs),
    /// Writes the uncontrolled bound problem in SDPA sparse format.
    ExportSdpa(ExportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Bound(_) => "bound",
            Command::Synth(_) => "synth",
            Command::Refine(_) => "refine",
            Command::Sweep(_) => "sweep",
            Command::Simulate(_) => "simulate",
            Command::ExportSdpa(_) => "export-sdpa",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SystemArgs {
    /// System definition (TOML).
    #[arg(long)]
    pub system: PathBuf,
    /// Relative tolerance of the SDP solver.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

impl SystemArgs {
    fn solver(&self) -> SolveOptions {
        SolveOptions {
            tol: self.tol,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BoundArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    /// Degree of the auxiliary function.
    #[arg(long, default_value_t = 2)]
    pub dv: u32,
    /// Also compute the lower bound.
    #[arg(long)]
    pub lower: bool,
    /// Check that the ball |x|^2/2 <= beta is absorbing (beta from the
    /// system file unless given).
    #[arg(long)]
    pub attractor: bool,
    #[arg(long)]
    pub attractor_beta: Option<f64>,
    /// Degree of the S-procedure multiplier for the ball.
    #[arg(long, default_value_t = 2)]
    pub ds: u32,
    /// Impose the bound only on the ball.
    #[arg(long)]
    pub restrict_to_ball: bool,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Method {
    /// SOS multipliers at every order.
    #[value(name = "AI")]
    #[serde(rename = "AI")]
    Ai,
    /// Sign-free multipliers.
    #[value(name = "AII")]
    #[serde(rename = "AII")]
    Aii,
}

impl Method {
    fn sign(self) -> MultiplierSign {
        match self {
            Method::Ai => MultiplierSign::Sos,
            Method::Aii => MultiplierSign::Free,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, value_enum, default_value = "AII")]
    pub method: Method,
    /// Highest order solved.
    #[arg(long, default_value_t = 1)]
    pub order: usize,
    /// Degree of each feedback term.
    #[arg(long, default_value_t = 2)]
    pub du: u32,
    /// Degree of each auxiliary term.
    #[arg(long, default_value_t = 2)]
    pub dv: u32,
    /// Degree of the multipliers; defaults to the feedback degree.
    #[arg(long)]
    pub ds: Option<u32>,
    /// Coefficient box of the order-i decisions.
    #[arg(long, default_value_t = 400.0)]
    pub rho: f64,
    /// Drop the coefficient box (the program is then usually unbounded).
    #[arg(long)]
    pub no_rho: bool,
    /// Amplitude stored in the controller and used for the prediction.
    #[arg(long, default_value_t = 8.7e-4)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.5)]
    pub kappa: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    /// Also write the bare controller JSON here.
    #[arg(long)]
    #[serde(skip)]
    pub controller_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RefineArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    /// Controller JSON, bare or a `synth` artifact.
    #[arg(long)]
    pub controller: PathBuf,
    /// Amplitude; the controller's own when absent.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, default_value_t = 6)]
    pub dv: u32,
    /// Add S-procedure terms on the uncontrolled residual.
    #[arg(long)]
    pub relax: bool,
    #[arg(long, default_value_t = 2)]
    pub ds: u32,
    /// Auxiliary degree of the uncontrolled solve that supplies the residual.
    #[arg(long, default_value_t = 2)]
    pub residual_dv: u32,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

/// `lo:hi:step`, endpoints included.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsRange {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl EpsRange {
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|k| self.lo + k as f64 * self.step).collect()
    }
}

impl FromStr for EpsRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, step] = parts[..] else {
            return Err(format!("expected lo:hi:step, got `{s}`"));
        };
        let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
        let r = EpsRange {
            lo: num(lo)?,
            hi: num(hi)?,
            step: num(step)?,
        };
        if !(r.step > 0.0 && r.lo.is_finite() && r.hi.is_finite() && r.lo >= 0.0 && r.hi >= r.lo) {
            return Err(format!("need 0 <= lo <= hi and step > 0, got `{s}`"));
        }
        Ok(r)
    }
}

impl fmt::Display for EpsRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.lo, self.hi, self.step)
    }
}

impl Serialize for EpsRange {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimArgs {
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Initial state, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    /// Leading fraction of the horizon excluded from averages.
    #[arg(long)]
    pub transient: Option<f64>,
}

impl SimArgs {
    fn resolve(&self, loaded: &LoadedSystem) -> Result<SimConfig> {
        let mut cfg = loaded.sim_config();
        if let Some(dt) = self.dt {
            cfg.dt = dt;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        if let Some(x0) = &self.x0 {
            cfg.x0 = x0.clone();
        }
        if let Some(t) = self.transient {
            cfg.transient_fraction = t;
        }
        cfg.validate(loaded.system.nstates())?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long)]
    pub controller: PathBuf,
    #[arg(long, default_value = "0:0.1:0.002")]
    pub eps: EpsRange,
    #[command(flatten)]
    pub sim: SimArgs,
    /// Auxiliary degree of the fixed-amplitude bounds.
    #[arg(long, default_value_t = 6)]
    pub dv: u32,
    #[arg(long, default_value_t = 2)]
    pub ds: u32,
    /// Skip the fixed-amplitude bounds.
    #[arg(long)]
    pub no_refine: bool,
    /// Degrees and gauge of the first-order coefficient behind `C_linear`.
    #[arg(long, default_value_t = 2)]
    pub linear_dv: u32,
    #[arg(long, default_value_t = 400.0)]
    pub rho: f64,
    /// Skip threshold bisection.
    #[arg(long)]
    pub no_thresholds: bool,
    #[arg(long, default_value_t = 1e-4)]
    pub resolution: f64,
    #[arg(long)]
    #[serde(skip)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    /// Closed loop with this controller; uncontrolled when absent.
    #[arg(long)]
    pub controller: Option<PathBuf>,
    #[arg(long, requires = "controller")]
    pub eps: Option<f64>,
    #[command(flatten)]
    pub sim: SimArgs,
    /// Also locate equilibria.
    #[arg(long)]
    pub equilibria: bool,
    /// Spacing of the Newton seed grid.
    #[arg(long, default_value_t = 1.0)]
    pub grid_step: f64,
    /// Half-width of the seed grid.
    #[arg(long, default_value_t = 4.0)]
    pub grid_radius: f64,
    /// Write `t, x...` every `stride` steps as CSV.
    #[arg(long)]
    #[serde(skip)]
    pub trajectory: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub stride: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExportArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, default_value_t = 2)]
    pub dv: u32,
    /// Export the lower-bound problem instead.
    #[arg(long)]
    pub lower: bool,
    /// SDPA file to write.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Re-import and compare, and cross-check the optimum with the
    /// external solver when built in.
    #[arg(long)]
    pub check: bool,
    /// Where to write the JSON report; stdout when absent.
    #[arg(long)]
    #[serde(skip)]
    pub report: Option<PathBuf>,
}

#[derive(Serialize)]
struct SystemEcho<'a> {
    path: &'a Path,
    config: &'a SystemConfig,
    warnings: &'a [String],
}

#[derive(Serialize)]
struct Artifact<'a, O: Serialize, R: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    system: SystemEcho<'a>,
    options: O,
    result: R,
}

fn load(args: &SystemArgs) -> Result<LoadedSystem> {
    let loaded = load_config(&args.system)?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    Ok(loaded)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn emit<O: Serialize, R: Serialize>(
    command: &'static str,
    args: &SystemArgs,
    loaded: &LoadedSystem,
    options: O,
    result: R,
    out: Option<&Path>,
) -> Result<()> {
    let artifact = Artifact {
        tool: "avgbound",
        version: VERSION,
        command,
        system: SystemEcho {
            path: &args.system,
            config: &loaded.config,
            warnings: &loaded.warnings,
        },
        options,
        result,
    };
    let mut text = serde_json::to_string_pretty(&artifact)?;
    text.push('\n');
    write_output(out, &text)
}

/// Reads a bare controller or the `result.controller` of a `synth` artifact.
pub fn read_controller(path: &Path) -> Result<Controller> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let value: Value =
        serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
    let inner = value
        .pointer("/result/controller")
        .cloned()
        .unwrap_or(value);
    serde_json::from_value(inner).with_context(|| format!("{} holds no controller", path.display()))
}

fn check_controller(ctl: &Controller, loaded: &LoadedSystem) -> Result<()> {
    let sys = &loaded.system;
    if ctl.states != sys.states() || ctl.inputs != sys.inputs() {
        bail!(
            "controller is for states {:?} and inputs {:?}, system has {:?} and {:?}",
            ctl.states,
            ctl.inputs,
            sys.states(),
            sys.inputs()
        );
    }
    Ok(())
}

fn run_bound(a: &BoundArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Options<'a> {
        cli: &'a BoundArgs,
        bound: &'a BoundOptions,
        attractor: Option<(f64, u32)>,
    }
    #[derive(Serialize)]
    struct Output {
        #[serde(rename = "C")]
        c: f64,
        upper: BoundCertificate,
        lower: Option<BoundCertificate>,
        attractor: Option<AttractorCertificate>,
    }
    let loaded = load(&a.system)?;
    let sys = &loaded.system;
    let beta = a.attractor_beta.or(sys.attractor_beta());
    let needs_beta = a.attractor || a.restrict_to_ball;
    let beta = match (needs_beta, beta) {
        (true, None) => bail!("no attractor_beta in the system file; pass --attractor-beta"),
        (true, Some(b)) if !(b > 0.0) => bail!("attractor beta must be positive, got {b}"),
        (_, b) => b,
    };
    let opts = BoundOptions {
        degree: a.dv,
        ball: if a.restrict_to_ball {
            beta.map(|beta| BallRestriction {
                beta,
                multiplier_degree: a.ds,
            })
        } else {
            None
        },
        solver: a.system.solver(),
    };
    let attractor = if a.attractor {
        let b = beta.expect("checked above");
        Some(attractor_certificate(sys, b, a.ds, &opts.solver)?)
    } else {
        None
    };
    let upper = upper_bound(sys, &opts)?;
    let lower = if a.lower { Some(lower_bound(sys, &opts)?) } else { None };
    let options = Options {
        cli: a,
        bound: &opts,
        attractor: a.attractor.then(|| (beta.unwrap_or_default(), a.ds)),
    };
    let output = Output {
        c: upper.c,
        upper,
        lower,
        attractor,
    };
    emit("bound", &a.system, &loaded, options, output, a.out.as_deref())
}

fn step_options(method: Method, du: u32, dv: u32, ds: Option<u32>, rho: Option<f64>, solver: SolveOptions) -> StepOptions {
    StepOptions {
        v_degree: dv,
        u_degree: du,
        multiplier_degree: ds,
        multiplier_sign: method.sign(),
        rho,
        solver,
    }
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Options<'a> {
        cli: &'a SynthArgs,
        order_zero: &'a StepOptions,
        step: &'a StepOptions,
    }
    #[derive(Serialize)]
    struct Output<'a> {
        #[serde(rename = "C")]
        c: Vec<f64>,
        controller: &'a Controller,
        bound: &'a PredictedBound,
        steps: &'a [StepResult],
    }
    if a.order == 0 {
        bail!("--order must be at least 1");
    }
    let loaded = load(&a.system)?;
    let sys = &loaded.system;
    let solver = a.system.solver();
    let zero = StepOptions {
        v_degree: a.dv,
        solver: solver.clone(),
        ..Default::default()
    };
    let rho = (!a.no_rho).then_some(a.rho);
    let opts = step_options(a.method, a.du, a.dv, a.ds, rho, solver);
    let mut state = ExpansionState::new();
    step(&mut state, sys, &zero)?;
    for i in 1..=a.order {
        let s = step(&mut state, sys, &opts)?;
        log::info!("order {i}: C = {}", s.c);
    }
    let assembly = assemble(&state, sys, a.eps, a.kappa, a.order)?;
    if let Some(p) = &a.controller_out {
        let mut text = assembly.controller.to_json();
        text.push('\n');
        write_output(Some(p), &text)?;
    }
    let options = Options {
        cli: a,
        order_zero: &zero,
        step: &opts,
    };
    let output = Output {
        c: state.c(),
        controller: &assembly.controller,
        bound: &assembly.bound,
        steps: state.steps(),
    };
    emit("synth", &a.system, &loaded, options, output, a.out.as_deref())
}

/// `F_0` of the uncontrolled solve at the given auxiliary degree.
fn uncontrolled_residuals(loaded: &LoadedSystem, dv: u32, solver: &SolveOptions) -> Result<(f64, Vec<avgbound::Polynomial>)> {
    let mut state = ExpansionState::new();
    let s = step(
        &mut state,
        &loaded.system,
        &StepOptions {
            v_degree: dv,
            solver: solver.clone(),
            ..Default::default()
        },
    )?;
    let c0 = s.c;
    Ok((c0, state.residuals()))
}

fn run_refine(a: &RefineArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Options<'a> {
        cli: &'a RefineArgs,
        refine: &'a RefineOptions,
    }
    #[derive(Serialize)]
    struct Output<'a> {
        #[serde(rename = "C")]
        c: f64,
        controller: &'a Controller,
        certificate: &'a BoundCertificate,
    }
    let loaded = load(&a.system)?;
    let mut ctl = read_controller(&a.controller)?;
    check_controller(&ctl, &loaded)?;
    if let Some(eps) = a.eps {
        if !(eps.is_finite() && eps >= 0.0) {
            bail!("--eps must be finite and nonnegative, got {eps}");
        }
        ctl = ctl.with_epsilon(eps);
    }
    let solver = a.system.solver();
    let residuals = if a.relax {
        uncontrolled_residuals(&loaded, a.residual_dv, &solver)?.1
    } else {
        Vec::new()
    };
    let opts = RefineOptions {
        v_degree: a.dv,
        relax: a.relax,
        multiplier_degree: a.ds,
        solver,
    };
    let cert = refine_fixed_eps(&loaded.system, &ctl, &residuals, &opts)?;
    let output = Output {
        c: cert.c,
        controller: &ctl,
        certificate: &cert,
    };
    emit(
        "refine",
        &a.system,
        &loaded,
        Options { cli: a, refine: &opts },
        output,
        a.out.as_deref(),
    )
}

fn run_sweep(a: &SweepArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Options<'a> {
        cli: &'a SweepArgs,
        eps: &'a [f64],
        sim: &'a SimConfig,
        search: &'a EquilibriumSearch,
        bounds: &'a SweepBounds,
        linear: &'a StepOptions,
    }
    #[derive(Serialize)]
    struct Output<'a> {
        rows: &'a [SweepRow],
        thresholds: Option<&'a Thresholds>,
    }
    let loaded = load(&a.system)?;
    let sys = &loaded.system;
    let ctl = read_controller(&a.controller)?;
    check_controller(&ctl, &loaded)?;
    if ctl.order() == 0 {
        bail!("controller has no feedback terms");
    }
    let cfg = a.sim.resolve(&loaded)?;
    let solver = a.system.solver();
    let eps = a.eps.values();

    let (c0, residuals) = uncontrolled_residuals(&loaded, a.linear_dv, &solver)?;
    let linear = StepOptions {
        v_degree: a.linear_dv,
        u_degree: a.linear_dv,
        rho: Some(a.rho),
        solver: solver.clone(),
        ..Default::default()
    };
    let mut state = ExpansionState::new();
    step(&mut state, sys, &StepOptions { v_degree: a.linear_dv, solver: solver.clone(), ..Default::default() })?;
    let c1 = match step_with_feedback(&mut state, sys, &linear, &ctl.terms[0]) {
        Ok(s) => Some(s.c),
        Err(e) => {
            log::warn!("no first-order coefficient for this feedback: {e}");
            None
        }
    };
    let bounds = SweepBounds {
        c0: Some(c0),
        c1,
        residuals,
        refine: (!a.no_refine).then_some(RefineOptions {
            v_degree: a.dv,
            relax: false,
            multiplier_degree: a.ds,
            solver,
        }),
    };
    let search = EquilibriumSearch::default();
    let rows = sweep_eps(sys, &ctl, &eps, &cfg, &bounds, &search);
    let thresholds = (!a.no_thresholds)
        .then(|| detect_thresholds(sys, &ctl, &rows, &cfg, &search, a.resolution));
    if let Some(p) = &a.csv {
        let file = fs::File::create(p).with_context(|| format!("cannot write {}", p.display()))?;
        write_sweep_csv(&rows, file)?;
    }
    let options = Options {
        cli: a,
        eps: &eps,
        sim: &cfg,
        search: &search,
        bounds: &bounds,
        linear: &linear,
    };
    let output = Output {
        rows: &rows,
        thresholds: thresholds.as_ref(),
    };
    emit("sweep", &a.system, &loaded, options, output, a.out.as_deref())
}

fn run_simulate(a: &SimulateArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Options<'a> {
        cli: &'a SimulateArgs,
        sim: &'a SimConfig,
        search: Option<&'a EquilibriumSearch>,
    }
    #[derive(Serialize)]
    struct Output<'a> {
        controller: Option<&'a Controller>,
        report: &'a SimReport,
        equilibria: Option<&'a [Equilibrium]>,
    }
    let loaded = load(&a.system)?;
    let sys = &loaded.system;
    let ctl = match &a.controller {
        Some(p) => {
            let mut c = read_controller(p)?;
            check_controller(&c, &loaded)?;
            if let Some(eps) = a.eps {
                c = c.with_epsilon(eps);
            }
            Some(c)
        }
        None => None,
    };
    let cfg = a.sim.resolve(&loaded)?;
    let cl = ClosedLoop::new(sys, ctl.as_ref())?;
    let traj = integrate(sys, ctl.as_ref(), &cfg)?;
    let rep = report(&cl, &traj, &cfg);
    if let Some(p) = &a.trajectory {
        let file = fs::File::create(p).with_context(|| format!("cannot write {}", p.display()))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["t".to_string()];
        header.extend(sys.states().iter().cloned());
        w.write_record(&header)?;
        for k in (0..traj.len()).step_by(a.stride.max(1)) {
            let mut rec = vec![traj.time(k).to_string()];
            rec.extend(traj.state(k).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    let search = a.equilibria.then(|| EquilibriumSearch {
        lo: vec![-a.grid_radius],
        hi: vec![a.grid_radius],
        step: a.grid_step,
        ..Default::default()
    });
    let equilibria = match &search {
        Some(s) => Some(find_equilibria(sys, ctl.as_ref(), s)?),
        None => None,
    };
    let options = Options {
        cli: a,
        sim: &cfg,
        search: search.as_ref(),
    };
    let output = Output {
        controller: ctl.as_ref(),
        report: &rep,
        equilibria: equilibria.as_deref(),
    };
    emit("simulate", &a.system, &loaded, options, output, a.out.as_deref())
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportReport {
    pub path: PathBuf,
    pub kind: BoundKind,
    pub constraints: usize,
    pub blocks: Vec<i64>,
    /// Re-importing the file reproduces the exported problem exactly, and
    /// exporting that again reproduces the file byte for byte.
    pub round_trip_exact: Option<bool>,
    pub internal: Option<SolveRecord>,
    pub external: Option<ExternalCheck>,
    /// Why the external comparison did not run.
    pub external_skipped: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExternalCheck {
    pub solver: String,
    pub status: String,
    pub objective: f64,
    pub difference: f64,
    pub tolerance: f64,
    pub agrees: bool,
}

#[cfg(feature = "external-solver")]
fn external_check(p: &sdp::SdpProblem, internal: f64) -> (Option<ExternalCheck>, Option<String>) {
    match external::solve(p) {
        Ok(s) => {
            let difference = (s.objective - internal).abs();
            (
                Some(ExternalCheck {
                    solver: s.solver.into(),
                    status: s.status,
                    objective: s.objective,
                    difference,
                    tolerance: EXTERNAL_TOLERANCE,
                    agrees: difference <= EXTERNAL_TOLERANCE,
                }),
                None,
            )
        }
        Err(e) => (None, Some(format!("external solver failed: {e}"))),
    }
}

#[cfg(not(feature = "external-solver"))]
fn external_check(_: &sdp::SdpProblem, _: f64) -> (Option<ExternalCheck>, Option<String>) {
    (None, Some("built without the external-solver feature".into()))
}

/// Exports the bound program and, when asked, checks the round trip and the
/// optimum against an external solver.
pub fn export_and_check(
    loaded: &LoadedSystem,
    kind: BoundKind,
    dv: u32,
    solver: &SolveOptions,
    out: &Path,
    check: bool,
) -> Result<ExportReport> {
    let opts = BoundOptions {
        degree: dv,
        ball: None,
        solver: solver.clone(),
    };
    let problem = system_bound_program(&loaded.system, kind, &opts)?.compile()?.sdp;
    let text = export_sdpa(&problem)?;
    fs::write(out, &text).with_context(|| format!("cannot write {}", out.display()))?;
    let lifted = lift_free_vars(&problem);
    let mut report = ExportReport {
        path: out.to_path_buf(),
        kind,
        constraints: lifted.num_constraints(),
        blocks: lifted
            .blocks
            .iter()
            .map(|b| match *b {
                sdp::BlockKind::Psd(n) => n as i64,
                sdp::BlockKind::Diag(n) => -(n as i64),
            })
            .collect(),
        round_trip_exact: None,
        internal: None,
        external: None,
        external_skipped: None,
    };
    if !check {
        return Ok(report);
    }
    let reread = fs::read_to_string(out)?;
    let back = import_sdpa(&reread)?;
    report.round_trip_exact = Some(back == lifted && export_sdpa(&back)? == text);
    let internal = sdp::solve(&problem, solver)?;
    if !internal.status.is_usable() {
        bail!("internal solver finished with status {:?}", internal.status);
    }
    let (external, skipped) = external_check(&back, internal.primal_objective);
    report.internal = Some(internal.report());
    report.external = external;
    report.external_skipped = skipped;
    Ok(report)
}

fn run_export(a: &ExportArgs) -> Result<()> {
    let loaded = load(&a.system)?;
    let kind = if a.lower { BoundKind::Lower } else { BoundKind::Upper };
    let report = export_and_check(&loaded, kind, a.dv, &a.system.solver(), &a.out, a.check)?;
    emit("export-sdpa", &a.system, &loaded, a, &report, a.report.as_deref())?;
    if report.round_trip_exact == Some(false) {
        bail!("SDPA round trip is not exact");
    }
    if let Some(e) = &report.external {
        if !e.agrees {
            bail!(
                "external objective {} differs from the internal one by {:e}",
                e.objective,
                e.difference
            );
        }
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Bound(a) => run_bound(a),
        Command::Synth(a) => run_synth(a),
        Command::Refine(a) => run_refine(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Simulate(a) => run_simulate(a),
        Command::ExportSdpa(a) => run_export(a),
    }
}

/// Caps rayon's global pool from `AVGBOUND_THREADS`.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("AVGBOUND_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("AVGBOUND_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use avgbound::bound::BoundError;
    use avgbound::config::ConfigError;
    use avgbound::sim::SimError;
    use avgbound::synthesis::SynthesisError;
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return "config";
        }
        if cause.is::<SynthesisError>() {
            return "synthesis";
        }
        if cause.is::<BoundError>() {
            return "bound";
        }
        if cause.is::<SimError>() {
            return "simulation";
        }
        if cause.is::<avgbound::sdp::SdpError>() || cause.is::<avgbound::sdp::SdpaError>() {
            return "sdp";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

/// `{"error": {"command", "kind", "message", "causes"}}`
pub fn error_json(command: Option<&str>, err: &anyhow::Error) -> Value {
    let causes: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
    serde_json::json!({
        "error": {
            "tool": "avgbound",
            "version": VERSION,
            "command": command,
            "kind": error_kind(err),
            "message": err.to_string(),
            "causes": causes,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_range_includes_both_ends() {
        let r: EpsRange = "0:0.1:0.002".parse().unwrap();
        let v = r.values();
        assert_eq!(v.len(), 51);
        assert_eq!(v[0], 0.0);
        assert!((v[50] - 0.1).abs() < 1e-15);
        assert_eq!(r.to_string(), "0:0.1:0.002");
        assert!("0:1".parse::<EpsRange>().is_err());
        assert!("0.1:0:0.01".parse::<EpsRange>().is_err());
        assert!("0:1:0".parse::<EpsRange>().is_err());
    }

    #[test]
    fn cli_parses_every_subcommand() {
        let parse = |args: &[&str]| Cli::try_parse_from(std::iter::once("avgbound").chain(args.iter().copied()));
        assert!(parse(&["bound", "--system", "s.toml", "--dv", "4", "--lower"]).is_ok());
        let synth = parse(&["synth", "--system", "s.toml", "--method", "AI", "--order", "2"]).unwrap();
        let Command::Synth(s) = synth.command else { panic!() };
        assert_eq!(s.method, Method::Ai);
        assert!(parse(&["synth", "--system", "s.toml", "--method", "AIII"]).is_err());
        let sim = parse(&["simulate", "--system", "s.toml", "--x0", "-0.3,-0.3,0.3"]).unwrap();
        let Command::Simulate(s) = sim.command else { panic!() };
        assert_eq!(s.sim.x0, Some(vec![-0.3, -0.3, 0.3]));
        assert!(parse(&["simulate", "--system", "s.toml", "--eps", "0.01"]).is_err());
        assert!(parse(&["export-sdpa", "--system", "s.toml", "--out", "o.dat-s", "--check"]).is_ok());
        assert!(parse(&["sweep", "--system", "s.toml", "--controller", "c.json", "--eps", "0:0.01:0.005"]).is_ok());
    }

    #[test]
    fn error_json_names_the_kind() {
        let err = anyhow::Error::from(avgbound::config::ConfigError::MissingDrift("y".into()));
        let v = error_json(Some("bound"), &err);
        assert_eq!(v["error"]["kind"], "config");
        assert_eq!(v["error"]["command"], "bound");
        assert!(v["error"]["message"].as_str().unwrap().contains("`y`"));
    }
}
