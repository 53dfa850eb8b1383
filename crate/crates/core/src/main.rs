use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use inertia_mpc::dmpc::{distributed_mpc_run, DmpcStepReport};
use inertia_mpc::dynamics::{monitor_constraints, simulate, ConstantPolicy, SimulationError};
use inertia_mpc::export::{emit_plot_data, write_trajectory_csv};
use inertia_mpc::mpc::{closed_loop_objective, receding_horizon_run, MpcError, Regime, StepOutcome};
use inertia_mpc::scenario::{parse_scenario, Scenario};
use inertia_mpc::{ControlInput, SystemState, Trajectory};

const EXIT_VALIDATION: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_IO: u8 = 4;

/// Frequency response with storage power and virtual inertia.
///
/// Log verbosity follows INERTIA_MPC_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "inertia-mpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Open loop with the reference inputs held constant.
    Simulate(RunArgs),
    /// Centralized receding-horizon control.
    Mpc(RunArgs),
    /// Distributed control over the scenario's areas.
    Dmpc(RunArgs),
    /// Centralized control under all four regimes, ranked by the frequency integral.
    Compare(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Regime applied to every storage.
    #[arg(long, value_enum)]
    regime: Option<RegimeArg>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Sampling time override (s).
    #[arg(long)]
    ts: Option<f64>,
    /// Simulated time override (s).
    #[arg(long)]
    ttotal: Option<f64>,
    /// Also write gnuplot columns, e.g. `t,omega_*`.
    #[arg(long, value_delimiter = ',')]
    plot: Vec<String>,
}

/// First letter inertia, second letter power; `c` constant, `v` variable.
#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Cc,
    Cv,
    Vc,
    Vv,
}

impl RegimeArg {
    fn code(self) -> &'static str {
        match self {
            RegimeArg::Cc => "cc",
            RegimeArg::Cv => "cv",
            RegimeArg::Vc => "vc",
            RegimeArg::Vv => "vv",
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("INERTIA_MPC_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    let (args, kind) = match &cmd {
        Command::Simulate(a) => (a, "simulate"),
        Command::Mpc(a) => (a, "mpc"),
        Command::Dmpc(a) => (a, "dmpc"),
        Command::Compare(a) => (a, "compare"),
    };
    let sc = load(args)?;
    fs::create_dir_all(&args.out).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", args.out.display())))?;
    match cmd {
        Command::Simulate(_) => run_simulate(&sc, args),
        Command::Mpc(_) => run_mpc(&sc, args, kind).map(|_| ()),
        Command::Dmpc(_) => run_dmpc(&sc, args),
        Command::Compare(_) => run_compare(&sc, args),
    }
}

fn load(args: &RunArgs) -> Result<Scenario, Failure> {
    let mut sc = parse_scenario(&args.scenario).map_err(|e| {
        let code = if e.is_io() { EXIT_IO } else { EXIT_VALIDATION };
        Failure::new(code, e.to_string())
    })?;
    if let Some(ts) = args.ts {
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(Failure::new(EXIT_VALIDATION, format!("--ts must be positive, got {ts}")));
        }
        sc.ts = ts;
        sc.mpc.ts = ts;
    }
    if let Some(t) = args.ttotal {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Failure::new(EXIT_VALIDATION, format!("--ttotal must be non-negative, got {t}")));
        }
        sc.t_total = t;
    }
    if let Some(r) = args.regime {
        sc.mpc = sc.mpc.clone().with_regime(Regime::from_code(r.code()).expect("regime codes are valid"));
    }
    sc.mpc.validate(&sc.grid).map_err(|e| Failure::new(EXIT_VALIDATION, e.to_string()))?;
    Ok(sc)
}

fn initial_state(sc: &Scenario) -> Result<SystemState, Failure> {
    SystemState::at_equilibrium(&sc.grid).map_err(|e| Failure::new(EXIT_VALIDATION, e.to_string()))
}

fn sim_failure(e: SimulationError) -> Failure {
    let code = match &e {
        SimulationError::BadTiming { .. } => EXIT_VALIDATION,
        SimulationError::Controller { source, .. } => match source.downcast_ref::<MpcError>() {
            Some(MpcError::Config(_)) => EXIT_VALIDATION,
            _ => EXIT_SOLVER,
        },
        SimulationError::InvalidControl { .. } => EXIT_SOLVER,
    };
    Failure::new(code, e.to_string())
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

/// Writes the trajectory CSV, constraint report, objective summary and any
/// requested plot data under `<out>/<scenario>_<tag>`.
fn write_run(sc: &Scenario, args: &RunArgs, tag: &str, traj: &Trajectory) -> Result<(), Failure> {
    let stem = args.out.join(format!("{}_{tag}", sc.name));
    let csv_path = args.out.join(format!("{}_{tag}.csv", sc.name));
    let file = fs::File::create(&csv_path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", csv_path.display())))?;
    write_trajectory_csv(&sc.grid, traj, file).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", csv_path.display())))?;

    let report = monitor_constraints(&sc.grid, traj, &sc.mpc.omega_limits);
    write_file(&path_with_suffix(&stem, "constraints.txt"), &report.render())?;

    let obj = closed_loop_objective(&sc.grid, &sc.mpc, traj);
    let summary = format!(
        "effort {:.12e}\nperformance {:.12e}\ntotal {:.12e}\nfrequency_integral {:.12e}\nsteps {}\n",
        obj.effort,
        obj.performance,
        obj.total,
        traj.frequency_integral(),
        traj.len().saturating_sub(1)
    );
    write_file(&path_with_suffix(&stem, "objective.txt"), &summary)?;

    if !args.plot.is_empty() {
        let sel: Vec<&str> = args.plot.iter().map(String::as_str).collect();
        let text = emit_plot_data(&sc.grid, traj, &sel).map_err(|e| Failure::new(EXIT_VALIDATION, e.to_string()))?;
        write_file(&path_with_suffix(&stem, "plot.dat"), &text)?;
    }
    println!("{tag}: {} rows, frequency integral {:.6}, objective {:.6} -> {}", traj.len(), traj.frequency_integral(), obj.total, csv_path.display());
    Ok(())
}

fn path_with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push("_");
    s.push(suffix);
    PathBuf::from(s)
}

fn run_simulate(sc: &Scenario, args: &RunArgs) -> Result<(), Failure> {
    let x0 = initial_state(sc)?;
    let mut policy = ConstantPolicy(ControlInput::reference(&sc.grid));
    let mut traj = simulate(&sc.grid, &x0, &mut policy, sc.t_total, sc.ts, sc.options).map_err(sim_failure)?;
    traj.scenario = sc.name.clone();
    write_run(sc, args, "simulate", &traj)
}

fn fallback_count(log: &[StepOutcome]) -> usize {
    log.iter().filter(|o| o.result().is_none()).count()
}

fn run_mpc(sc: &Scenario, args: &RunArgs, tag: &str) -> Result<Trajectory, Failure> {
    let x0 = initial_state(sc)?;
    let (mut traj, log) = receding_horizon_run(&sc.grid, &x0, &sc.mpc, sc.t_total, sc.options).map_err(sim_failure)?;
    traj.scenario = sc.name.clone();
    let fallbacks = fallback_count(&log);
    if fallbacks > 0 {
        log::warn!("{fallbacks} of {} steps applied a fallback input", log.len());
    }
    write_run(sc, args, tag, &traj)?;
    Ok(traj)
}

fn run_dmpc(sc: &Scenario, args: &RunArgs) -> Result<(), Failure> {
    let partition = sc
        .partition
        .as_ref()
        .ok_or_else(|| Failure::new(EXIT_VALIDATION, "scenario has no [distributed] section"))?;
    let x0 = initial_state(sc)?;
    let (mut traj, log, reports) =
        distributed_mpc_run(&sc.grid, &x0, partition, &sc.mpc, &sc.admm, sc.t_total, sc.options).map_err(sim_failure)?;
    traj.scenario = sc.name.clone();
    let fallbacks = fallback_count(&log);
    if fallbacks > 0 {
        log::warn!("{fallbacks} of {} steps applied a fallback input", log.len());
    }
    write_run(sc, args, "dmpc", &traj)?;
    let path = args.out.join(format!("{}_dmpc_admm.csv", sc.name));
    write_file(&path, &render_admm(&reports))?;
    let unconverged = reports.iter().filter(|r| !r.converged).count();
    let worst = reports.iter().map(|r| r.max_iterations()).max().unwrap_or(0);
    println!("admm: {} steps, {unconverged} unconverged, at most {worst} rounds per solve", reports.len());
    Ok(())
}

/// One line per ADMM solve: step time, SQP iteration, rounds, final residuals, status.
fn render_admm(reports: &[DmpcStepReport]) -> String {
    let mut out = String::from("t,sqp_iteration,rounds,primal_residual,dual_residual,status,area_objectives\n");
    for r in reports {
        for (i, a) in r.admm.iter().enumerate() {
            let objs: Vec<String> = a.area_objectives.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{:?},{}\n",
                r.t,
                i + 1,
                a.iterations,
                a.primal_history.last().copied().unwrap_or(0.0),
                a.dual_history.last().copied().unwrap_or(0.0),
                a.status,
                objs.join(";")
            ));
        }
    }
    out
}

fn run_compare(sc: &Scenario, args: &RunArgs) -> Result<(), Failure> {
    let mut ranking = Vec::new();
    for code in ["cc", "cv", "vc", "vv"] {
        let regime = Regime::from_code(code).expect("regime codes are valid");
        let mut run = Scenario { mpc: sc.mpc.clone().with_regime(regime), ..sc.clone() };
        run.name = sc.name.clone();
        let traj = run_mpc(&run, args, &format!("mpc_{code}"))?;
        ranking.push((code, regime.describe(), traj.frequency_integral()));
    }
    ranking.sort_by(|a, b| a.2.total_cmp(&b.2));
    let mut table = String::from("rank,regime,description,frequency_integral\n");
    for (i, (code, desc, v)) in ranking.iter().enumerate() {
        table.push_str(&format!("{},{code},{desc},{v:.12e}\n", i + 1));
    }
    write_file(&args.out.join(format!("{}_ranking.csv", sc.name)), &table)?;
    print!("{table}");
    Ok(())
}
