//! Command-line pipeline: `bench`, `gramians`, `reduce`, `bounds`, `simulate`.
//!
//! Exit codes: 0 ok, 2 input error, 3 order selection, 4 solver
//! non-convergence, 5 certificate failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{self, GammaMethod, Horizon};
use crate::balancing::{self, BalancedRealization, ObservableRestriction, ReducedModel};
use crate::benchmark::{self, HeatBenchmarkConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::operators::{self, HAUTUS_TOL};
use crate::simulate::{self, ControlSpec, ErrorSystemMode, InitialState, InputSignal, SimulationConfig};
use crate::solvers::{self, GramianPair, ReachabilityStrategy, SolverConfig};
use crate::system::StochasticSystem;

/// Certificate threshold for the relative Riccati residual and the LMI margin.
pub const CERT_TOL: f64 = 1e-8;

#[derive(Debug, Parser)]
#[command(name = "stochbt", version, about = "LQG balanced truncation for stochastic systems with multiplicative noise")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the heat-equation benchmark bundle.
    Bench(BenchArgs),
    /// Computes the Gramian pair of a system bundle.
    Gramians(GramianArgs),
    /// Balances and truncates.
    Reduce(ReduceArgs),
    /// Error bound report and preservation certificates.
    Bounds(BoundsArgs),
    /// Moment ODE and Monte Carlo runs of full, error or feedback systems.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 36)]
    pub n: usize,
    #[arg(long, default_value_t = 0.2)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    pub nu: f64,
    #[arg(long, default_value_t = 64)]
    pub quad_points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum StrategyArg {
    SubgradientFeasibility,
    ConstructiveEpsilon,
    ExternalSdp,
}

#[derive(Debug, Args)]
pub struct GramianArgs {
    #[arg(long)]
    pub system: PathBuf,
    #[arg(long, value_enum, default_value = "subgradient_feasibility")]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Skip the trace ascent after feasibility.
    #[arg(long)]
    pub no_trace: bool,
    /// Exchange directory for `external_sdp` (default: `<out>/sdp`).
    #[arg(long)]
    pub sdp_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReduceArgs {
    #[arg(long)]
    pub system: PathBuf,
    #[arg(long)]
    pub gramians: PathBuf,
    #[arg(long, conflicts_with = "tol")]
    pub order: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum GammaArg {
    WorstCase,
    OperatorNorm,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long)]
    pub system: PathBuf,
    #[arg(long)]
    pub gramians: PathBuf,
    #[arg(long)]
    pub reduced: PathBuf,
    /// Finite horizon T, or `inf`.
    #[arg(long, default_value = "10")]
    pub horizon: String,
    #[arg(long, value_enum, default_value = "operator_norm")]
    pub gamma: GammaArg,
    /// Step of the discretized reduced input-output map.
    #[arg(long, default_value_t = 1e-2)]
    pub dt: f64,
    #[arg(long, default_value = "bounds.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Open,
    Closed,
    ReducedFeedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitialArg {
    Zero,
    Random,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub system: PathBuf,
    #[arg(long)]
    pub reduced: Option<PathBuf>,
    /// Gramian directory; needed for `closed` and for the bound values.
    #[arg(long)]
    pub gramians: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "open")]
    pub mode: ModeArg,
    /// `reference`, `zero` or a CSV file with columns `t,u1,…,um`.
    #[arg(long, default_value = "reference")]
    pub control: String,
    /// Initial state (default: random for `reduced-feedback`, else zero).
    #[arg(long, value_enum)]
    pub x0: Option<InitialArg>,
    #[arg(long = "T", default_value_t = 10.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub dt: f64,
    #[arg(long, default_value_t = 0)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub record_every: usize,
    /// Sample paths written to paths.csv.
    #[arg(long, default_value_t = 5)]
    pub keep_paths: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Bench(a) => cmd_bench(&a),
        Command::Gramians(a) => cmd_gramians(&a),
        Command::Reduce(a) => cmd_reduce(&a),
        Command::Bounds(a) => cmd_bounds(&a),
        Command::Simulate(a) => cmd_simulate(&a),
    }
}

// ---------------------------------------------------------------- bench

pub fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let cfg = HeatBenchmarkConfig { n: args.n, alpha: args.alpha, nu: args.nu, quad_points: args.quad_points };
    let sys = benchmark::build_heat_system(&cfg)?;
    let mut meta = serde_json::Map::new();
    meta.insert("generator".into(), json!("heat_benchmark"));
    meta.insert("config".into(), serde_json::to_value(&cfg)?);
    meta.insert("seed".into(), Value::Null);
    io::save_system(&args.out, &sys, meta)?;

    let ms = operators::mean_square_stability(&sys)?;
    let detectable = operators::hautus_detectability(&sys, HAUTUS_TOL)?.holds;
    let stab = operators::stabilizability_probe(&sys)?;
    println!("benchmark n = {}  alpha = {}  nu = {}", sys.n(), cfg.alpha, cfg.nu);
    println!("  mean-square abscissa   {:>12.4e}  ({})", ms.abscissa, if ms.stable { "stable" } else { "unstable" });
    println!("  Hautus detectability   {detectable:>12}");
    println!("  stabilizability probe  {:>12}", stab.stabilizable);
    io::write_json(
        &args.out.join("summary.json"),
        &json!({
            "n": sys.n(),
            "mean_square_stability": ms,
            "detectable": detectable,
            "stabilizable": stab.stabilizable,
        }),
    )?;
    Ok(0)
}

// ---------------------------------------------------------------- gramians

fn strategy(arg: StrategyArg, dir: &Path) -> ReachabilityStrategy {
    match arg {
        StrategyArg::SubgradientFeasibility => ReachabilityStrategy::SubgradientFeasibility,
        StrategyArg::ConstructiveEpsilon => ReachabilityStrategy::ConstructiveEpsilon,
        StrategyArg::ExternalSdp => ReachabilityStrategy::ExternalSdp { dir: dir.to_path_buf() },
    }
}

#[derive(Debug, Serialize)]
struct PairDiagnostics {
    n: usize,
    q_residual: f64,
    q_relative_residual: f64,
    q_iterations: usize,
    p_margin: f64,
    p_iterations: usize,
    p_trace_steps: usize,
    closed_loop: operators::SpectralCertificate,
    passed: bool,
}

fn pair_diagnostics(sys: &StochasticSystem, pair: &GramianPair) -> PairDiagnostics {
    let scale = (sys.c().transpose() * sys.c()).norm();
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let rel = pair.q_residual / scale;
    PairDiagnostics {
        n: sys.n(),
        q_residual: pair.q_residual,
        q_relative_residual: rel,
        q_iterations: pair.iterations,
        p_margin: pair.p_margin,
        p_iterations: pair.p_iterations,
        p_trace_steps: pair.p_trace_steps,
        closed_loop: pair.closed_loop_certificate,
        passed: rel <= CERT_TOL && pair.p_margin <= CERT_TOL && pair.closed_loop_certificate.stable,
    }
}

pub fn cmd_gramians(args: &GramianArgs) -> Result<i32> {
    let (sys, _) = io::load_system(&args.system)?;
    let cfg = SolverConfig { tol: args.tol, maximize_trace: !args.no_trace, ..Default::default() };
    let sdp = args.sdp_dir.clone().unwrap_or_else(|| args.out.join("sdp"));
    std::fs::create_dir_all(&args.out)?;

    let full = solvers::compute_gramians(&sys, &cfg, &strategy(args.strategy, &sdp))?;
    io::write_mtx(&args.out.join("P.mtx"), &full.p)?;
    io::write_mtx(&args.out.join("Q.mtx"), &full.q)?;
    let full_diag = pair_diagnostics(&sys, &full);
    let mut passed = full_diag.passed;

    let restriction = balancing::observable_restriction(&sys, balancing::KRYLOV_TOL)?;
    let observable = if restriction.is_identity() {
        Value::Null
    } else {
        if restriction.invariance_residual > balancing::INVARIANCE_TOL {
            return Err(Error::numerical(format!(
                "observable subspace is not invariant to tolerance ({:.3e})",
                restriction.invariance_residual
            )));
        }
        let sub = &restriction.system;
        let pair = solvers::compute_gramians(sub, &cfg, &strategy(args.strategy, &sdp.join("observable")))?;
        io::write_mtx(&args.out.join("basis.mtx"), &restriction.basis)?;
        io::write_mtx(&args.out.join("P_o.mtx"), &pair.p)?;
        io::write_mtx(&args.out.join("Q_o.mtx"), &pair.q)?;
        let d = pair_diagnostics(sub, &pair);
        passed &= d.passed;
        json!({
            "n": sub.n(),
            "invariance_residual": restriction.invariance_residual,
            "unobservable_abscissa": restriction.unobservable_abscissa,
            "gramians": d,
        })
    };
    println!("Gramians of n = {} ({})", sys.n(), full.strategy.name());
    println!("  Riccati residual (rel)  {:>12.4e}", full_diag.q_relative_residual);
    println!("  LMI margin              {:>12.4e}", full_diag.p_margin);
    println!("  closed-loop abscissa    {:>12.4e}", full_diag.closed_loop.abscissa);
    if let Some(n) = observable.get("n") {
        println!("  observable part         {n:>12}");
    }
    println!("  certificates            {:>12}", if passed { "passed" } else { "FAILED" });
    io::write_json(
        &args.out.join("diagnostics.json"),
        &json!({
            "strategy": full.strategy.name(),
            "tol": args.tol,
            "maximize_trace": cfg.maximize_trace,
            "full": full_diag,
            "observable": observable,
            "passed": passed,
        }),
    )?;
    Ok(if passed { 0 } else { 5 })
}

/// Gramians on the observable part, read back from a `gramians` directory.
struct LoadedGramians {
    restriction: ObservableRestriction,
    p: DMatrix<f64>,
    q: DMatrix<f64>,
}

impl LoadedGramians {
    fn load(sys: &StochasticSystem, dir: &Path) -> Result<Self> {
        let basis_path = dir.join("basis.mtx");
        if basis_path.exists() {
            let v = io::read_mtx(&basis_path)?;
            if v.nrows() != sys.n() || v.ncols() > sys.n() {
                return Err(Error::input("basis.mtx does not match the system"));
            }
            let sub = sys.transform(&v.transpose(), &v);
            let restriction = ObservableRestriction {
                complement: DMatrix::zeros(sys.n(), 0),
                system: sub,
                basis: v,
                invariance_residual: f64::NAN,
                unobservable_abscissa: None,
            };
            let p = io::read_mtx(&dir.join("P_o.mtx"))?;
            let q = io::read_mtx(&dir.join("Q_o.mtx"))?;
            return Ok(Self { restriction, p, q });
        }
        let n = sys.n();
        let restriction = ObservableRestriction {
            basis: DMatrix::identity(n, n),
            complement: DMatrix::zeros(n, 0),
            system: sys.clone(),
            invariance_residual: 0.0,
            unobservable_abscissa: None,
        };
        Ok(Self { restriction, p: io::read_mtx(&dir.join("P.mtx"))?, q: io::read_mtx(&dir.join("Q.mtx"))? })
    }

    fn balance(&self) -> Result<BalancedRealization> {
        balancing::balance(&self.restriction.system, &self.p, &self.q)
    }

    fn q_full(&self) -> DMatrix<f64> {
        self.restriction.lift_gramian(&self.q)
    }
}

// ---------------------------------------------------------------- reduce

fn sigma_rows(sigma: &[f64]) -> Vec<Vec<f64>> {
    sigma.iter().enumerate().map(|(k, &s)| vec![(k + 1) as f64, s, balancing::hat(s)]).collect()
}

pub fn cmd_reduce(args: &ReduceArgs) -> Result<i32> {
    let (sys, _) = io::load_system(&args.system)?;
    let g = LoadedGramians::load(&sys, &args.gramians)?;
    let bal = g.balance()?;
    let n_o = bal.sigma.len();
    let (r, chosen_by, warning) = match (args.order, args.tol) {
        (Some(r), None) => (r, "order", false),
        (None, Some(tol)) => {
            let c = balancing::choose_order(&bal.sigma, tol)?;
            if c.warning {
                eprintln!("warning: no order below {n_o} meets tolerance {tol:e} with an admissible gap");
            }
            (c.r, "tol", c.warning)
        }
        _ => return Err(Error::input("give exactly one of --order and --tol")),
    };
    let reduced = g.restriction.embed(&balancing::truncate(&bal, r)?);
    std::fs::create_dir_all(&args.out)?;
    let mut meta = serde_json::Map::new();
    meta.insert("generator".into(), json!("reduce"));
    meta.insert("r".into(), json!(r));
    meta.insert("seed".into(), Value::Null);
    io::save_system(&args.out, &reduced.system, meta)?;
    io::write_mtx(&args.out.join("V.mtx"), &reduced.v)?;
    io::write_mtx(&args.out.join("W.mtx"), &reduced.w)?;
    let header = ["k", "sigma", "hat_sigma"].map(String::from);
    io::write_csv(&args.out.join("sigma.csv"), &header, &sigma_rows(&bal.sigma))?;
    let gap = if r < n_o { bal.sigma[r - 1] - bal.sigma[r] } else { f64::INFINITY };
    let info = json!({
        "r": r,
        "n": sys.n(),
        "n_balanced": n_o,
        "chosen_by": chosen_by,
        "tol": args.tol,
        "warning": warning,
        "gap": if gap.is_finite() { json!(gap) } else { Value::Null },
        "tail_coefficient": balancing::tail_coefficient(&bal.sigma, r),
    });
    io::write_json(&args.out.join("reduce.json"), &info)?;
    println!("reduced order r = {r} of {n_o} balanced states (n = {})", sys.n());
    println!("  {:>3}  {:>12}  {:>12}", "k", "sigma", "hat sigma");
    for row in sigma_rows(&bal.sigma) {
        println!("  {:>3}  {:>12.4e}  {:>12.4e}", row[0] as usize, row[1], row[2]);
    }
    println!("  tail coefficient {:.4e}", balancing::tail_coefficient(&bal.sigma, r));
    Ok(0)
}

fn load_reduced(dir: &Path) -> Result<(ReducedModel, Vec<f64>)> {
    let (system, _) = io::load_system(dir)?;
    let v = io::read_mtx(&dir.join("V.mtx"))?;
    let w = io::read_mtx(&dir.join("W.mtx"))?;
    let (_, rows) = io::read_csv(&dir.join("sigma.csv"))?;
    let sigma: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let r = system.n();
    if sigma.len() < r || v.ncols() != r || w.nrows() != r {
        return Err(Error::input("reduced bundle is inconsistent"));
    }
    Ok((ReducedModel { system, sigma_r: sigma[..r].to_vec(), v, w, r }, sigma))
}

// ---------------------------------------------------------------- bounds

fn parse_horizon(s: &str) -> Result<Horizon> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "infinity" | "∞" => Ok(Horizon::Infinite),
        v => {
            let t: f64 = v.parse().map_err(|_| Error::input(format!("bad horizon '{s}'")))?;
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::input(format!("horizon must be positive, got {t}")));
            }
            Ok(Horizon::Finite(t))
        }
    }
}

pub fn cmd_bounds(args: &BoundsArgs) -> Result<i32> {
    let (sys, _) = io::load_system(&args.system)?;
    let g = LoadedGramians::load(&sys, &args.gramians)?;
    let bal = g.balance()?;
    let (reduced, sigma) = load_reduced(&args.reduced)?;
    if sigma.len() != bal.sigma.len() {
        return Err(Error::input("sigma.csv does not match the Gramians"));
    }
    let horizon = parse_horizon(&args.horizon)?;
    let method = match args.gamma {
        GammaArg::WorstCase => GammaMethod::WorstCase,
        GammaArg::OperatorNorm => GammaMethod::OperatorNorm,
    };
    let sim = SimulationConfig { t_end: horizon.value().unwrap_or(SimulationConfig::default().t_end), dt: args.dt, ..Default::default() };
    let gamma = match analysis::gamma_t(&reduced, horizon, method, &sim) {
        Ok(g) => Some(g),
        Err(Error::Unsupported(msg)) => {
            eprintln!("warning: γ_T not available: {msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let report = analysis::error_bound_report(&g.restriction.system, &g.p, &g.q, &sigma, &reduced, horizon, gamma)?;
    let truncated = balancing::truncate(&bal, reduced.r)?;
    let cert = analysis::preservation_certificates(&bal, &truncated)?;
    println!("error bounds for r = {} (n = {})", report.r, sys.n());
    println!("  tail coefficient 2Σ σ̂_k  {:>12.4e}", report.tail_coefficient);
    println!("  plain tail 2Σ σ_k         {:>12.4e}", report.plain_tail);
    println!("  β                         {:>12.4e}", report.beta);
    if let Some(g) = &report.gamma_t {
        println!("  γ_T                       {:>12.4e}", g.value);
    }
    println!("  reduced closed loop       {:>12.4e}", cert.reduced_closed_loop.abscissa);
    println!("  reduced detectable        {:>12}", cert.reduced_detectable);
    println!("  type-II inequalities      {:>12}", cert.typeii_holds);
    println!("  certificates              {:>12}", if cert.passed { "passed" } else { "FAILED" });
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    io::write_json(&args.out, &json!({ "report": report, "certificate": cert }))?;
    Ok(if cert.passed { 0 } else { 5 })
}

// ---------------------------------------------------------------- simulate

fn control_signal(spec: &str, m: usize) -> Result<Option<InputSignal>> {
    match spec {
        "zero" => Ok(None),
        "reference" => Ok(Some(InputSignal::broadcast(m, benchmark::reference_input))),
        path => {
            let (header, rows) = io::read_csv(Path::new(path))?;
            if header.len() != m + 1 {
                return Err(Error::input(format!("control file needs columns t,u1..u{m}")));
            }
            let times = rows.iter().map(|r| r[0]).collect();
            let values = rows.iter().map(|r| DVector::from_row_slice(&r[1..])).collect();
            Ok(Some(InputSignal::from_samples(times, values)?))
        }
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let (sys, _) = io::load_system(&args.system)?;
    let reduced = args.reduced.as_deref().map(load_reduced).transpose()?;
    let gram = args.gramians.as_deref().map(|d| LoadedGramians::load(&sys, d)).transpose()?;
    let signal = control_signal(&args.control, sys.inputs())?;
    let x0 = args.x0.unwrap_or(if args.mode == ModeArg::ReducedFeedback { InitialArg::Random } else { InitialArg::Zero });

    let (target, label) = match (args.mode, &reduced) {
        (ModeArg::Open, None) => (sys.clone(), "y"),
        (ModeArg::Open, Some((red, _))) => (simulate::build_error_system(&sys, red, &ErrorSystemMode::OpenLoop)?, "y-y_r"),
        (ModeArg::Closed, Some((red, _))) => {
            let g = gram.as_ref().ok_or_else(|| Error::input("--mode closed needs --gramians"))?;
            (simulate::build_error_system(&sys, red, &ErrorSystemMode::ClosedLoop { q: g.q_full() })?, "y-y_r")
        }
        (ModeArg::ReducedFeedback, Some((red, _))) => (simulate::reduced_feedback_on_full(&sys, red)?, "y"),
        (_, None) => return Err(Error::input("this mode needs --reduced")),
    };
    let initial = match x0 {
        InitialArg::Zero => InitialState::Zero,
        InitialArg::Random if target.n() == sys.n() => InitialState::RandomUnit,
        InitialArg::Random => {
            // Same random full state in both copies of an error system.
            let cfg = SimulationConfig { seed: args.seed, x0: InitialState::RandomUnit, ..Default::default() };
            let x = cfg.initial_state(sys.n())?;
            let red = &reduced.as_ref().expect("error systems have a reduced model").0;
            let mut z = DVector::zeros(target.n());
            z.rows_mut(0, sys.n()).copy_from(&x);
            z.rows_mut(sys.n(), red.r).copy_from(&red.restrict(&x));
            InitialState::Fixed(z)
        }
    };
    let cfg = SimulationConfig {
        t_end: args.t_end,
        dt: args.dt,
        n_paths: args.paths,
        seed: args.seed,
        x0: initial,
        record_every: args.record_every,
        keep_paths: args.keep_paths.min(args.paths),
    };
    let control = signal.clone().map_or(ControlSpec::Zero, ControlSpec::OpenLoop);
    let traj = simulate::propagate_moments(&target, &control, &cfg)?;
    std::fs::create_dir_all(&args.out)?;

    let recorded: Vec<usize> = (0..traj.t.len()).filter(|&k| k % cfg.record_every == 0 || k + 1 == traj.t.len()).collect();
    let mut pair_energy = None;
    if let (ModeArg::Closed, Some((red, _)), Some(g)) = (args.mode, &reduced, &gram) {
        let pair = target.with_c(simulate::feedback_pair_output(&sys, red, &g.q_full()))?;
        pair_energy = Some(simulate::propagate_moments(&pair, &control, &cfg)?.output_energy);
    }
    let mut header: Vec<String> = vec!["t".into(), "E_y2".into(), "E_u2".into(), "tr_X".into()];
    if pair_energy.is_some() {
        header.push("E_pair2".into());
    }
    let rows: Vec<Vec<f64>> = recorded
        .iter()
        .map(|&k| {
            let mut row = vec![traj.t[k], traj.output_energy[k], traj.input_energy[k], traj.state_energy[k]];
            if let Some(p) = &pair_energy {
                row.push(p[k]);
            }
            row
        })
        .collect();
    io::write_csv(&args.out.join("moments.csv"), &header, &rows)?;

    let output_l2 = simulate::trapezoid(&traj.t, &traj.output_energy).sqrt();
    let input_l2 = simulate::trapezoid(&traj.t, &traj.input_energy).sqrt();
    let mut summary = serde_json::Map::new();
    summary.insert("mode".into(), json!(format!("{:?}", args.mode).to_lowercase()));
    summary.insert("output".into(), json!(label));
    summary.insert("n".into(), json!(sys.n()));
    summary.insert("r".into(), json!(reduced.as_ref().map(|(r, _)| r.r)));
    summary.insert("state_dim".into(), json!(target.n()));
    summary.insert("T".into(), json!(args.t_end));
    summary.insert("dt".into(), json!(traj.dt));
    summary.insert("steps".into(), json!(cfg.steps()));
    summary.insert("paths".into(), json!(args.paths));
    summary.insert("seed".into(), json!(args.seed));
    summary.insert("output_l2".into(), json!(output_l2));
    summary.insert("input_l2".into(), json!(input_l2));
    summary.insert("initial_output_energy".into(), json!(traj.output_energy[0]));
    summary.insert("final_output_energy".into(), json!(traj.output_energy.last()));
    summary.insert("min_eig_ratio".into(), json!(traj.min_eig_ratio));

    if let Some((red, sigma)) = &reduced {
        let r = red.r;
        match args.mode {
            ModeArg::Closed => {
                let pair_l2 = simulate::trapezoid(&traj.t, pair_energy.as_ref().expect("closed mode")).sqrt();
                let u1 = simulate::trapezoid(&traj.t, &traj.input_energy).sqrt();
                let bound = analysis::feedback_bound(sigma, r, u1)?;
                summary.insert("pair_l2".into(), json!(pair_l2));
                summary.insert("bound".into(), json!(bound));
                summary.insert("bound_holds".into(), json!(pair_l2 <= bound));
            }
            ModeArg::Open => {
                if let Some(g) = &gram {
                    let beta = analysis::beta(&g.restriction.system, &g.p, &g.q);
                    let lhs = simulate::weighted_trapezoid(&traj.t, &traj.output_energy, beta).sqrt();
                    let u = simulate::weighted_trapezoid(&traj.t, &traj.input_energy, beta).sqrt();
                    let bound = analysis::weighted_bound(sigma, r, beta, u)?;
                    summary.insert("beta".into(), json!(beta));
                    summary.insert("weighted_output_l2".into(), json!(lhs));
                    summary.insert("bound".into(), json!(bound));
                    summary.insert("bound_holds".into(), json!(lhs <= bound));
                }
            }
            ModeArg::ReducedFeedback => {
                let cert = operators::mean_square_stability(&target)?;
                summary.insert("closed_loop".into(), serde_json::to_value(cert)?);
            }
        }
    }

    if args.paths > 0 {
        let batch = simulate::integrate_sde(&target, &control, &cfg)?;
        let mut header: Vec<String> = vec!["t".into(), "mc_E_y2".into(), "mc_se_y2".into(), "moment_E_y2".into()];
        for kp in &batch.kept {
            for i in 0..target.outputs() {
                header.push(format!("path{}_y{}", kp.index, i + 1));
            }
        }
        let mut max_z = 0.0f64;
        let rows: Vec<Vec<f64>> = recorded
            .iter()
            .enumerate()
            .map(|(slot, &k)| {
                let se = batch.se_output_energy[k];
                let diff = (batch.mean_output_energy[k] - traj.output_energy[k]).abs();
                if se > 0.0 {
                    max_z = max_z.max(diff / se);
                }
                let mut row = vec![traj.t[k], batch.mean_output_energy[k], se, traj.output_energy[k]];
                for kp in &batch.kept {
                    row.extend(kp.y[slot].iter().copied());
                }
                row
            })
            .collect();
        io::write_csv(&args.out.join("paths.csv"), &header, &rows)?;
        let (cost, cost_se) = batch.cost_estimate();
        summary.insert(
            "monte_carlo".into(),
            json!({ "max_z": max_z, "within_3se": max_z <= 3.0, "cost": cost, "cost_se": cost_se }),
        );
    }
    println!("simulated {} on [0, {}] with {} steps", label, args.t_end, cfg.steps());
    println!("  ‖{label}‖_L2  {output_l2:>12.4e}");
    for key in ["pair_l2", "bound", "bound_holds"] {
        if let Some(v) = summary.get(key) {
            println!("  {key:<10} {v}");
        }
    }
    io::write_json(&args.out.join("summary.json"), &Value::Object(summary))?;
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pipeline_commands() {
        let cli = Cli::try_parse_from(["stochbt", "reduce", "--system", "s", "--gramians", "g", "--order", "3", "--out", "o"]);
        assert!(matches!(cli.unwrap().command, Command::Reduce(ReduceArgs { order: Some(3), .. })));
        let both = Cli::try_parse_from(["stochbt", "reduce", "--system", "s", "--gramians", "g", "--order", "3", "--tol", "1e-3", "--out", "o"]);
        assert!(both.is_err());
        let sim = Cli::try_parse_from(["stochbt", "simulate", "--system", "s", "--mode", "reduced-feedback", "--T", "2", "--out", "o"]);
        assert!(matches!(sim.unwrap().command, Command::Simulate(SimulateArgs { mode: ModeArg::ReducedFeedback, .. })));
        let strat = Cli::try_parse_from(["stochbt", "gramians", "--system", "s", "--strategy", "external_sdp", "--out", "o"]);
        assert!(matches!(strat.unwrap().command, Command::Gramians(GramianArgs { strategy: StrategyArg::ExternalSdp, .. })));
    }

    #[test]
    fn horizon_parsing() {
        assert_eq!(parse_horizon("inf").unwrap(), Horizon::Infinite);
        assert_eq!(parse_horizon("2.5").unwrap(), Horizon::Finite(2.5));
        assert!(parse_horizon("-1").is_err());
    }

    #[test]
    fn bad_arguments_exit_with_input_code() {
        assert_eq!(main_with_args(["stochbt", "bench"]), 2);
        assert_eq!(main_with_args(["stochbt", "bounds", "--system", "/nonexistent", "--gramians", "g", "--reduced", "r"]), 2);
    }
}
