//! Command-line front end.
//!
//! Exit codes: 0 success, 2 invalid input or I/O failure, 3 planner did not
//! converge (artifacts are still written), 4 numerical failure.

pub mod files;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::kinematics::{JointState, RobotModel};
use crate::planner::{self, IterationRecord, PlanResult, PlanStatus, ScoConfig, TrajectoryProblem};
use crate::risk::{self, DEFAULT_EPS_TOL};
use crate::validate::{self, MonteCarloReport};
use files::Scene;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Io(_) => EXIT_INPUT,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        match e {
            crate::Error::Domain(msg) => CliError::Input(msg),
            e @ crate::Error::Numerical { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "scora", version, about = "Chance-constrained trajectory optimization with certified collision risk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plan a trajectory under a joint risk budget.
    Plan(Common),
    /// Certify the collision risk of one configuration.
    Certify {
        #[command(flatten)]
        common: Common,
        /// Joint configuration, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        theta: Vec<f64>,
    },
    /// Monte Carlo collision probability of a trajectory CSV.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trajectory: PathBuf,
    },
    /// Risk-blind, IRA and chance-constrained plans side by side.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Samples per IRA round.
        #[arg(long, default_value_t = 1000)]
        ira_samples: u64,
        #[arg(long, default_value_t = 10)]
        ira_rounds: usize,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// Scene JSON file or builtin:NAME (corridor, gap, pick-place).
    #[arg(long)]
    scene: String,
    /// Robot JSON file or builtin:NAME; defaults to the scene's task robot.
    #[arg(long)]
    robot: Option<String>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    eps_tol: Option<f64>,
    /// Joint risk budget.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    timesteps: Option<usize>,
    /// Required clearance from nominal geometry (m).
    #[arg(long)]
    margin: Option<f64>,
    /// Monte Carlo sample count.
    #[arg(long, default_value_t = 100_000)]
    samples: u64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    start: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    goal: Option<Vec<f64>>,
    /// Planner settings as JSON (camelCase keys, any subset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

/// Everything a command needs after the inputs are loaded.
struct Context {
    scene: Scene,
    robot_spec: String,
    robot: RobotModel,
    config: ScoConfig,
}

impl Common {
    fn load(&self) -> Result<Context, CliError> {
        let scene = files::load_scene(&self.scene)?;
        let robot_spec = match (&self.robot, &scene.task) {
            (Some(r), _) => r.clone(),
            (None, Some(task)) => task.robot.clone(),
            (None, None) => return Err(CliError::Input("no --robot given and the scene has no task robot".into())),
        };
        let base = if self.robot.is_some() { None } else { scene.base_dir.as_deref() };
        let robot = files::load_robot(&robot_spec, base)?;
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Input(format!("config file {}: {e}", path.display())))?;
                serde_json::from_str::<ScoConfig>(&text)
                    .map_err(|e| CliError::Input(format!("config file {}: {e}", path.display())))?
            }
            None => ScoConfig::default(),
        };
        if let Some(tol) = self.eps_tol {
            config.eps_tol = tol;
        }
        config.validate()?;
        Ok(Context {
            scene,
            robot_spec,
            robot,
            config,
        })
    }

    fn eps_tol(&self) -> f64 {
        self.eps_tol.unwrap_or(DEFAULT_EPS_TOL)
    }

    fn problem(&self, ctx: &Context) -> Result<TrajectoryProblem, CliError> {
        let task = ctx.scene.task.as_ref();
        let missing = |what: &str| CliError::Input(format!("--{what} is required when the scene has no task"));
        let start = match (&self.start, task) {
            (Some(v), _) => v.clone(),
            (None, Some(t)) => t.start.clone(),
            (None, None) => return Err(missing("start")),
        };
        let goal = match (&self.goal, task) {
            (Some(v), _) => v.clone(),
            (None, Some(t)) => t.goal.clone(),
            (None, None) => return Err(missing("goal")),
        };
        let timesteps = self.timesteps.or(task.map(|t| t.timesteps)).ok_or_else(|| missing("timesteps"))?;
        let delta = self.delta.or(task.map(|t| t.delta)).ok_or_else(|| missing("delta"))?;
        let margin = self.margin.or(task.map(|t| t.margin)).unwrap_or(0.0);
        Ok(TrajectoryProblem::new(
            ctx.robot.clone(),
            ctx.scene.obstacles.clone(),
            timesteps,
            files::joint_vector(&start, &ctx.robot, "start")?,
            files::joint_vector(&goal, &ctx.robot, "goal")?,
            delta,
            margin,
        )?)
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", self.out_dir.display())))?;
        Ok(&self.out_dir)
    }
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct PlanSummary {
    scene: String,
    robot: String,
    status: PlanStatus,
    objective: f64,
    path_length: f64,
    runtime_seconds: f64,
    timesteps: usize,
    delta: f64,
    margin: f64,
    eps_tol: f64,
    allocation_sum: f64,
    total_certified_risk: f64,
    max_violation: f64,
    iterations: usize,
    log: Vec<IterationRecord>,
}

fn cmd_plan(common: &Common) -> Result<i32, CliError> {
    let ctx = common.load()?;
    let problem = common.problem(&ctx)?;
    let out = common.out_dir()?;
    let clock = Instant::now();
    let result = planner::solve(&problem, &ctx.config)?;
    let runtime = clock.elapsed().as_secs_f64();
    report::write_trajectory(&out.join("trajectory.csv"), &ctx.robot, &result.trajectory)?;
    report::write_allocation(&out.join("allocation.csv"), &result.allocation, &result.risks)?;
    let summary = PlanSummary {
        scene: ctx.scene.name.clone(),
        robot: ctx.robot_spec.clone(),
        status: result.status,
        objective: result.objective,
        path_length: planner::path_length(&result.trajectory),
        runtime_seconds: runtime,
        timesteps: problem.timesteps,
        delta: problem.budget,
        margin: problem.margin,
        eps_tol: ctx.config.eps_tol,
        allocation_sum: result.allocation.iter().sum(),
        total_certified_risk: result.report.total_risk,
        max_violation: result.report.max_violation,
        iterations: result.log.len(),
        log: result.log.clone(),
    };
    report::write_json(&out.join("summary.json"), &summary)?;
    let svg = report::render_svg(&ctx.scene.name, &ctx.robot, &problem.obstacles, &result.trajectory)?;
    std::fs::write(out.join("plot.svg"), svg).map_err(|e| CliError::Io(format!("plot.svg: {e}")))?;
    println!(
        "{}: objective {:.6}, path length {:.6}, certified risk {:.3e}, {:.3} s",
        status_name(result.status),
        summary.objective,
        summary.path_length,
        summary.total_certified_risk,
        runtime
    );
    Ok(if result.status == PlanStatus::Converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn status_name(s: PlanStatus) -> &'static str {
    match s {
        PlanStatus::Converged => "converged",
        PlanStatus::Infeasible => "infeasible",
        PlanStatus::IterationLimit => "iteration-limit",
    }
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct ObstacleCertificate {
    name: String,
    eps1: f64,
    eps2: f64,
    eps_prime: f64,
    saturated: bool,
    contact_normal: [f64; 3],
    /// Absent when saturated.
    gradient: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct CertifyReport {
    scene: String,
    robot: String,
    theta: Vec<f64>,
    eps_tol: f64,
    obstacles: Vec<ObstacleCertificate>,
    total: f64,
}

fn cmd_certify(common: &Common, theta: &[f64]) -> Result<i32, CliError> {
    let ctx = common.load()?;
    let theta = files::joint_vector(theta, &ctx.robot, "theta")?;
    let eps_tol = common.eps_tol();
    let scene = risk::scene_risk(&ctx.robot, &theta, &ctx.scene.obstacles, eps_tol)?;
    let obstacles = ctx
        .scene
        .obstacles
        .iter()
        .zip(&scene.certificates)
        .map(|(o, c)| {
            let gradient = if c.saturated {
                None
            } else {
                Some(risk::risk_gradient(c, &ctx.robot, &theta, o)?.iter().copied().collect())
            };
            let n = c.contact_normal();
            Ok(ObstacleCertificate {
                name: o.name.clone(),
                eps1: c.eps1,
                eps2: c.eps2,
                eps_prime: c.eps_prime,
                saturated: c.saturated,
                contact_normal: [n.x, n.y, n.z],
                gradient,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let report = CertifyReport {
        scene: ctx.scene.name.clone(),
        robot: ctx.robot_spec.clone(),
        theta: theta.iter().copied().collect(),
        eps_tol,
        obstacles,
        total: scene.total,
    };
    report::write_json(&common.out_dir()?.join("certificate.json"), &report)?;
    println!("total certified risk {:.6e}", report.total);
    Ok(EXIT_OK)
}

/// Σ_t Σ_O ε′, summed in the same order as the planner's report.
fn certified_total(robot: &RobotModel, traj: &[JointState], scene: &Scene, eps_tol: f64) -> Result<f64, CliError> {
    let steps = traj
        .iter()
        .map(|q| Ok(risk::scene_risk(robot, q, &scene.obstacles, eps_tol)?.total))
        .collect::<Result<Vec<f64>, CliError>>()?;
    Ok(steps.iter().sum())
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct ValidateReport {
    scene: String,
    robot: String,
    trajectory: String,
    timesteps: usize,
    eps_tol: f64,
    monte_carlo: MonteCarloReport,
    certified_total: f64,
    /// p̂ within three standard errors of the certified bound.
    consistent_with_certificate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<f64>,
}

fn cmd_validate(common: &Common, trajectory: &Path) -> Result<i32, CliError> {
    let ctx = common.load()?;
    let traj = files::read_trajectory(trajectory, &ctx.robot)?;
    let mc = validate::monte_carlo_risk(&ctx.robot, &traj, &ctx.scene.obstacles, common.samples, common.seed)?;
    let eps_tol = ctx.config.eps_tol;
    let certified = certified_total(&ctx.robot, &traj, &ctx.scene, eps_tol)?;
    let report = ValidateReport {
        scene: ctx.scene.name.clone(),
        robot: ctx.robot_spec.clone(),
        trajectory: trajectory.display().to_string(),
        timesteps: traj.len(),
        eps_tol,
        consistent_with_certificate: mc.estimate <= certified + 3.0 * mc.standard_error,
        monte_carlo: mc,
        certified_total: certified,
        delta: common.delta.or(ctx.scene.task.as_ref().map(|t| t.delta)),
    };
    report::write_json(&common.out_dir()?.join("validation.json"), &report)?;
    println!(
        "monte carlo risk {:.6} ± {:.6} over {} samples; certified total {:.6e}",
        report.monte_carlo.estimate, report.monte_carlo.standard_error, report.monte_carlo.sample_count, certified
    );
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CompareRow {
    pub algorithm: String,
    pub status: String,
    pub runtime_seconds: Option<f64>,
    pub path_length: Option<f64>,
    pub objective: Option<f64>,
    pub monte_carlo_risk: Option<f64>,
    pub standard_error: Option<f64>,
    pub samples: u64,
    pub seed: u64,
    pub certified_risk: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct CompareReport {
    scene: String,
    robot: String,
    timesteps: usize,
    delta: f64,
    margin: f64,
    ira_samples: u64,
    ira_rounds: usize,
    rows: Vec<CompareRow>,
}

fn compare_row(
    name: &str,
    problem: &TrajectoryProblem,
    common: &Common,
    eps_tol: f64,
    run: impl FnOnce() -> crate::Result<PlanResult>,
) -> CompareRow {
    let clock = Instant::now();
    let outcome = run().and_then(|r| {
        let runtime = clock.elapsed().as_secs_f64();
        let mc = validate::monte_carlo_risk(&problem.robot, &r.trajectory, &problem.obstacles, common.samples, common.seed)?;
        let certified = planner::evaluate_constraints(problem, &r.trajectory, &r.allocation, eps_tol)?.total_risk;
        Ok((r, runtime, mc, certified))
    });
    let mut row = CompareRow {
        algorithm: name.into(),
        status: "error".into(),
        runtime_seconds: None,
        path_length: None,
        objective: None,
        monte_carlo_risk: None,
        standard_error: None,
        samples: common.samples,
        seed: common.seed,
        certified_risk: None,
        error: None,
    };
    match outcome {
        Ok((r, runtime, mc, certified)) => {
            row.status = status_name(r.status).into();
            row.runtime_seconds = Some(runtime);
            row.path_length = Some(planner::path_length(&r.trajectory));
            row.objective = Some(r.objective);
            row.monte_carlo_risk = Some(mc.estimate);
            row.standard_error = Some(mc.standard_error);
            row.certified_risk = Some(certified);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

fn cmd_compare(common: &Common, ira_samples: u64, ira_rounds: usize) -> Result<i32, CliError> {
    let ctx = common.load()?;
    let problem = common.problem(&ctx)?;
    let out = common.out_dir()?;
    let config = &ctx.config;
    let eps = config.eps_tol;
    let rows = vec![
        compare_row("risk-blind", &problem, common, eps, || validate::risk_blind_plan(&problem, config)),
        compare_row("ira", &problem, common, eps, || {
            validate::ira_plan(&problem, config, ira_samples, ira_rounds, common.seed)
        }),
        compare_row("scora", &problem, common, eps, || planner::solve(&problem, config)),
    ];
    report::write_table(&out.join("compare.csv"), &rows)?;
    let report = CompareReport {
        scene: ctx.scene.name.clone(),
        robot: ctx.robot_spec.clone(),
        timesteps: problem.timesteps,
        delta: problem.budget,
        margin: problem.margin,
        ira_samples,
        ira_rounds,
        rows,
    };
    report::write_json(&out.join("compare.json"), &report)?;
    println!("{:<12} {:>16} {:>10} {:>12} {:>10}", "algorithm", "status", "runtime s", "path length", "mc risk");
    for r in &report.rows {
        let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        println!(
            "{:<12} {:>16} {:>10} {:>12} {:>10}",
            r.algorithm,
            r.status,
            f(r.runtime_seconds, 3),
            f(r.path_length, 4),
            f(r.monte_carlo_risk, 5)
        );
    }
    Ok(EXIT_OK)
}

fn dispatch(command: &Command) -> Result<i32, CliError> {
    match command {
        Command::Plan(common) => cmd_plan(common),
        Command::Certify { common, theta } => cmd_certify(common, theta),
        Command::Validate { common, trajectory } => cmd_validate(common, trajectory),
        Command::Compare {
            common,
            ira_samples,
            ira_rounds,
        } => cmd_compare(common, *ira_samples, *ira_rounds),
    }
}

fn common(command: &Command) -> &Common {
    match command {
        Command::Plan(c) => c,
        Command::Certify { common, .. } | Command::Validate { common, .. } | Command::Compare { common, .. } => common,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let outcome = match common(&cli.command).threads {
        Some(0) => Err(CliError::Input("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Input(format!("thread pool: {e}")))
            .and_then(|pool| pool.install(|| dispatch(&cli.command))),
        None => dispatch(&cli.command),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_errors_map_to_exit_codes() {
        assert_eq!(CliError::from(crate::Error::domain("bad")).exit_code(), EXIT_INPUT);
        assert_eq!(CliError::from(crate::Error::numerical("cholesky", "pivot")).exit_code(), EXIT_NUMERICAL);
        assert_eq!(CliError::Io("disk".into()).exit_code(), EXIT_INPUT);
    }

    #[test]
    fn parse_failures_and_help() {
        assert_eq!(run(["scora", "--version"]), EXIT_OK);
        assert_eq!(run(["scora", "plan", "--scene", "builtin:corridor", "--threads", "0"]), EXIT_INPUT);
        assert_eq!(run(["scora", "launch"]), EXIT_INPUT);
    }
}
