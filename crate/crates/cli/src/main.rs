//! `patrol`: simulate, optimize, run the receding-horizon controller or
//! check gradients for a mission described in a JSON config.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use patrol_core::horizon::{rh_run, RhSettings, Search};
use patrol_core::io::{export, load_config, RunConfig, RunManifest, Subcommand, Summary};
use patrol_core::ipa::{finite_difference_gradient, grad_check_table, ipa_gradient};
use patrol_core::optimizer::{default_seed, optimize, OptimizerSettings};
use patrol_core::sim::simulate;
use patrol_core::{Execution, MissionConfig, SwitchingSchedule};

#[derive(Parser)]
#[command(
    name = "patrol",
    version,
    about = "Persistent-monitoring solver for a 1-D mission space"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Simulate one switching schedule.
    Simulate(Common),
    /// Optimize the switching schedule.
    Optimize(Common),
    /// Run the receding-horizon controller.
    Rh(Common),
    /// Compare perturbation gradients with central differences.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// JSON mission configuration.
    #[arg(long)]
    config: PathBuf,
    /// Switching schedule, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    theta: Option<Vec<f64>>,
    /// Optimizer stopping threshold on the projected gradient norm.
    #[arg(long)]
    eps: Option<f64>,
    /// Optimizer iteration cap per phase.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Receding-horizon planning window H.
    #[arg(long)]
    horizon: Option<f64>,
    /// Receding-horizon action interval h.
    #[arg(long)]
    action: Option<f64>,
    /// Restrict the receding-horizon control to {-1, +1}.
    #[arg(long)]
    binary_control: bool,
    /// Sampling interval of trajectory.csv.
    #[arg(long, default_value_t = 0.1)]
    sample_dt: f64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for the random schedule drawn by gradcheck when none is given.
    #[arg(long)]
    seed: Option<u64>,
    /// Finite-difference step for gradcheck, as a fraction of L.
    #[arg(long, default_value_t = 1e-6)]
    fd_step: f64,
    /// Run every stage on one thread.
    #[arg(long)]
    sequential: bool,
}

struct Failure {
    code: String,
    message: String,
    line: Option<usize>,
    column: Option<usize>,
    exit: u8,
}

impl Failure {
    fn runtime(code: &str, err: impl std::fmt::Display) -> Self {
        Self {
            code: code.into(),
            message: err.to_string(),
            line: None,
            column: None,
            exit: 1,
        }
    }

    fn usage(code: &str, err: impl std::fmt::Display) -> Self {
        Self {
            exit: 2,
            ..Self::runtime(code, err)
        }
    }

    fn report(&self) {
        let body = json!({
            "error": {
                "code": self.code,
                "message": self.message,
                "line": self.line,
                "column": self.column,
            }
        });
        eprintln!("{body}");
    }
}

impl From<patrol_core::io::IoError> for Failure {
    fn from(err: patrol_core::io::IoError) -> Self {
        match err {
            patrol_core::io::IoError::Parse(p) => Self {
                code: p.code.into(),
                message: p.message,
                line: p.line,
                column: p.column,
                exit: 2,
            },
            other => Self::runtime(other.code(), other),
        }
    }
}

fn overrides(c: &Common) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            map.insert(k.to_string(), v);
        }
    };
    put(
        "theta",
        c.theta
            .as_ref()
            .map(|t| t.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
    );
    put("eps", c.eps.map(|v| v.to_string()));
    put("max_iters", c.max_iters.map(|v| v.to_string()));
    put("horizon", c.horizon.map(|v| v.to_string()));
    put("action", c.action.map(|v| v.to_string()));
    put("binary_control", c.binary_control.then(|| "true".into()));
    put("seed", c.seed.map(|v| v.to_string()));
    if c.sequential {
        map.insert("sequential".into(), "true".into());
    }
    map
}

fn mission_echo(m: &MissionConfig) -> serde_json::Value {
    json!({ "L": m.length, "r": m.range, "B": m.service, "T": m.horizon, "M": m.len() })
}

fn schedule(c: &Common, run: &RunConfig) -> Result<Option<SwitchingSchedule>, Failure> {
    match &c.theta {
        Some(t) => SwitchingSchedule::new(t.clone(), run.mission.length)
            .map(Some)
            .map_err(|e| Failure::usage("invalid_theta", e)),
        None => Ok(run.theta.clone()),
    }
}

fn optimizer_settings(c: &Common, run: &RunConfig) -> Result<OptimizerSettings, Failure> {
    let mut s = run.optimizer.unwrap_or_default();
    if let Some(eps) = c.eps {
        s.eps = eps;
    }
    if let Some(n) = c.max_iters {
        s.max_iters = n;
    }
    s.validate()
        .map_err(|e| Failure::usage("invalid_optimizer", e))?;
    Ok(s)
}

fn rh_settings(c: &Common, run: &RunConfig, exec: Execution) -> Result<RhSettings, Failure> {
    let mut s = run.rh.unwrap_or_else(|| RhSettings::defaults(&run.mission));
    if let Some(h) = c.horizon {
        s.planning = h;
        if c.action.is_none() && run.rh.is_none() {
            s.action = 0.5 * h;
        }
    }
    if let Some(a) = c.action {
        s.action = a;
    }
    if c.binary_control {
        s.search = Search::Binary;
    }
    s.execution = exec;
    s.validate(&run.mission)
        .map_err(|e| Failure::usage("invalid_rh", e))?;
    Ok(s)
}

fn execute(kind: Subcommand, c: &Common) -> Result<(), Failure> {
    let manifest = RunManifest {
        subcommand: kind,
        config_path: Some(c.config.clone()),
        overrides: overrides(c),
        output_dir: c.out.clone(),
        sample_dt: c.sample_dt,
    };
    manifest.validate()?;
    let run = load_config(&c.config)?;
    let mission = &run.mission;
    let exec = if c.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };

    let (trajectory, summary) = match kind {
        Subcommand::Simulate => {
            let theta = schedule(c, &run)?.ok_or_else(|| {
                Failure::usage("missing_theta", "simulate needs --theta or a `theta` entry")
            })?;
            let traj = simulate(mission, &theta).map_err(|e| Failure::runtime("simulation", e))?;
            let mut summary = Summary::for_trajectory(kind, &traj);
            summary.settings = json!({ "mission": mission_echo(mission) });
            (traj, summary)
        }
        Subcommand::Optimize => {
            let settings = optimizer_settings(c, &run)?;
            let seed = schedule(c, &run)?;
            let seed_echo = seed.clone().unwrap_or_else(|| default_seed(mission));
            let report = optimize(mission, seed, &settings)
                .map_err(|e| Failure::runtime("optimization", e))?;
            let traj = simulate(mission, &report.theta_star)
                .map_err(|e| Failure::runtime("simulation", e))?;
            let mut summary = Summary::for_trajectory(kind, &traj);
            summary.cost = report.cost_star;
            summary.iterations = Some(report.iterations());
            summary.grad_norm = Some(report.grad_norm);
            summary.cost_history = report.cost_history();
            summary.dimension_history = report.dimension_history();
            summary.converged = Some(report.converged);
            summary.interior = Some(report.interior);
            summary.settings = json!({
                "mission": mission_echo(mission),
                "optimizer": settings,
                "theta0": seed_echo.as_slice(),
            });
            (traj, summary)
        }
        Subcommand::Rh => {
            let settings = rh_settings(c, &run, exec)?;
            let result =
                rh_run(mission, &settings).map_err(|e| Failure::runtime("receding_horizon", e))?;
            let mut summary = Summary::for_trajectory(kind, &result.trajectory);
            summary.cost = result.cost;
            summary.controls = result.controls.clone();
            summary.settings = json!({
                "mission": mission_echo(mission),
                "H": settings.planning,
                "h": settings.action,
                "search": settings.search,
                "grid_points": settings.grid_points,
            });
            (result.trajectory, summary)
        }
        Subcommand::Gradcheck => {
            let theta = match schedule(c, &run)? {
                Some(t) => t,
                None => {
                    let n = default_seed(mission).len();
                    let mut rng = ChaCha8Rng::seed_from_u64(c.seed.unwrap_or(0));
                    let draw: Vec<f64> =
                        (0..n).map(|_| rng.gen_range(0.0..mission.length)).collect();
                    SwitchingSchedule::project(&draw, mission.length)
                }
            };
            let traj = simulate(mission, &theta).map_err(|e| Failure::runtime("simulation", e))?;
            let grad = ipa_gradient(mission, &theta, &traj)
                .map_err(|e| Failure::runtime("gradient", e))?;
            let step = c.fd_step * mission.length;
            let fd = finite_difference_gradient(mission, &theta, step, exec)
                .map_err(|e| Failure::runtime("simulation", e))?;
            let rows = grad_check_table(&grad, &fd);
            let mut summary = Summary::for_trajectory(kind, &traj);
            summary.grad_norm = Some(grad.norm());
            summary.max_rel_err = Some(rows.iter().filter_map(|r| r.rel_err).fold(0.0, f64::max));
            summary.gradient = rows;
            summary.settings = json!({
                "mission": mission_echo(mission),
                "fd_step": step,
                "seed": c.seed,
            });
            (traj, summary)
        }
    };

    export(&trajectory, &summary, &manifest)?;
    println!(
        "{}: J = {:.4}, N = {}, output in {}",
        serde_json::to_value(kind)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default(),
        summary.cost,
        summary.dimension,
        manifest.output_dir.display()
    );
    if let Some(err) = summary.max_rel_err {
        println!("max relative error {err:.3e}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            Failure::usage("usage", e.to_string().trim_end()).report();
            return ExitCode::from(2);
        }
    };
    let (kind, common) = match &cli.command {
        Command::Simulate(c) => (Subcommand::Simulate, c),
        Command::Optimize(c) => (Subcommand::Optimize, c),
        Command::Rh(c) => (Subcommand::Rh, c),
        Command::Gradcheck(c) => (Subcommand::Gradcheck, c),
    };
    match execute(kind, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            f.report();
            ExitCode::from(f.exit)
        }
    }
}
