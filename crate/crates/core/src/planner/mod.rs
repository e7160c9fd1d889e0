//! Chance-constrained trajectory optimization.
//!
//! The planner minimizes the squared joint-space path length subject to a
//! signed-distance margin against nominal obstacles, per-timestep risk rows
//! Σ_O ε_O(θ_t) ≤ δ_t and the joint budget Σ δ_t ≤ Δ. Constraints are
//! linearized around the current trajectory and handled by an ℓ1 penalty
//! inside a trust region.

mod convexify;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::distance_estimate;
use crate::kinematics::{jacobian_from_chain, JointState, RobotModel};
use crate::qp::{solve_qp_warm, QpStatus, QpTolerances};
use crate::risk::{self, RiskCertificate, UncertainObstacle, DEFAULT_EPS_TOL};

pub use convexify::convexify;
use convexify::Model;

/// Joint states θ₀ … θ_{T−1}.
pub type Trajectory = Vec<JointState>;
/// Per-timestep risk allocation δ₀ … δ_{T−1}.
pub type RiskAllocation = Vec<f64>;

/// Absolute tolerance for the signed distances behind margin rows (m).
const DISTANCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct TrajectoryProblem {
    pub robot: RobotModel,
    pub obstacles: Vec<UncertainObstacle>,
    pub timesteps: usize,
    pub start: JointState,
    pub goal: JointState,
    /// Joint risk budget Δ.
    pub budget: f64,
    /// Required signed distance to nominal geometry (m).
    pub margin: f64,
}

impl TrajectoryProblem {
    pub fn new(
        robot: RobotModel,
        obstacles: Vec<UncertainObstacle>,
        timesteps: usize,
        start: JointState,
        goal: JointState,
        budget: f64,
        margin: f64,
    ) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::domain(format!("need at least 2 timesteps, got {timesteps}")));
        }
        if !(budget > 0.0 && budget < 1.0) {
            return Err(Error::domain(format!("risk budget must lie in (0, 1), got {budget}")));
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(Error::domain(format!("margin must be finite and non-negative, got {margin}")));
        }
        let (lo, hi) = (robot.lower_limits(), robot.upper_limits());
        for (name, q) in [("start", &start), ("goal", &goal)] {
            if q.len() != robot.dof() {
                return Err(Error::domain(format!(
                    "{name} has {} entries, robot has {} joints",
                    q.len(),
                    robot.dof()
                )));
            }
            if let Some(j) = (0..q.len()).find(|&j| !(q[j] >= lo[j] && q[j] <= hi[j])) {
                return Err(Error::domain(format!(
                    "{name} joint {j} = {} lies outside its limits [{}, {}]",
                    q[j], lo[j], hi[j]
                )));
            }
        }
        Ok(Self {
            robot,
            obstacles,
            timesteps,
            start,
            goal,
            budget,
            margin,
        })
    }

    pub fn dof(&self) -> usize {
        self.robot.dof()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct ScoConfig {
    pub mu_initial: f64,
    pub mu_growth: f64,
    pub mu_max: f64,
    /// Trust-region half-width on each joint (rad or m).
    pub radius_initial: f64,
    pub radius_expand: f64,
    pub radius_shrink: f64,
    pub radius_min: f64,
    /// Minimum ratio of true to predicted merit improvement for acceptance.
    pub improve_ratio: f64,
    /// Allowed signed-distance margin violation (m).
    pub constraint_tolerance: f64,
    /// Merit change that ends an inner loop.
    pub objective_tolerance: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub eps_tol: f64,
    /// Pairs farther than margin + this distance get no margin row.
    pub distance_activation: f64,
}

impl Default for ScoConfig {
    fn default() -> Self {
        Self {
            mu_initial: 10.0,
            mu_growth: 10.0,
            mu_max: 1e6,
            radius_initial: 0.3,
            radius_expand: 1.5,
            radius_shrink: 0.25,
            radius_min: 1e-4,
            improve_ratio: 0.25,
            constraint_tolerance: 1e-4,
            objective_tolerance: 1e-4,
            max_outer: 8,
            max_inner: 40,
            eps_tol: DEFAULT_EPS_TOL,
            distance_activation: 0.1,
        }
    }
}

impl ScoConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("muInitial", self.mu_initial),
            ("muMax", self.mu_max),
            ("radiusInitial", self.radius_initial),
            ("radiusExpand", self.radius_expand),
            ("radiusShrink", self.radius_shrink),
            ("radiusMin", self.radius_min),
            ("improveRatio", self.improve_ratio),
            ("constraintTolerance", self.constraint_tolerance),
            ("objectiveTolerance", self.objective_tolerance),
            ("epsTol", self.eps_tol),
            ("distanceActivation", self.distance_activation),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.mu_growth > 1.0) {
            return Err(Error::domain(format!("muGrowth must exceed 1, got {}", self.mu_growth)));
        }
        if self.radius_shrink >= 1.0 || self.radius_expand < 1.0 {
            return Err(Error::domain("radiusShrink must be below 1 and radiusExpand at least 1"));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::domain("iteration limits must be positive"));
        }
        if self.eps_tol >= 0.5 {
            return Err(Error::domain(format!("epsTol must lie in (0, 0.5), got {}", self.eps_tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanStatus {
    Converged,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IterationRecord {
    pub iteration: usize,
    pub mu: f64,
    pub radius: f64,
    pub objective: f64,
    /// Objective plus μ times the true violations at the kept trajectory.
    pub merit: f64,
    pub max_violation: f64,
    pub allocation_sum: f64,
    pub accepted: bool,
    pub ratio: f64,
}

/// True (not linearized) constraint values along a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ViolationReport {
    /// Smallest signed distance to each nominal obstacle, `[t][obstacle]`.
    pub signed_distances: Vec<Vec<f64>>,
    /// Certified risk bound per obstacle, `[t][obstacle]`.
    pub risks: Vec<Vec<f64>>,
    pub saturated: Vec<Vec<bool>>,
    /// Σ_O ε_O(θ_t) per timestep.
    pub step_risks: Vec<f64>,
    /// Σ_O ε_O(θ_t) − δ_t.
    pub risk_residuals: Vec<f64>,
    /// Σ δ_t − Δ.
    pub allocation_residual: f64,
    /// Largest margin − sd over the free (non-endpoint) timesteps.
    pub margin_residual: f64,
    pub total_risk: f64,
    /// Largest positive residual of any kind.
    pub max_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub trajectory: Trajectory,
    pub allocation: RiskAllocation,
    pub status: PlanStatus,
    /// Certified Σ_O ε_O(θ_t) per timestep.
    pub risks: Vec<f64>,
    /// Σ‖θ_t − θ_{t−1}‖² (rad²).
    pub objective: f64,
    pub log: Vec<IterationRecord>,
    pub report: ViolationReport,
}

/// Straight line in joint space with the budget spread evenly.
pub fn seed_trajectory(problem: &TrajectoryProblem) -> (Trajectory, RiskAllocation) {
    let t_max = (problem.timesteps - 1) as f64;
    let traj = (0..problem.timesteps)
        .map(|t| {
            let s = t as f64 / t_max;
            &problem.start * (1.0 - s) + &problem.goal * s
        })
        .collect();
    let alloc = vec![problem.budget / problem.timesteps as f64; problem.timesteps];
    (traj, alloc)
}

/// Σ‖θ_t − θ_{t−1}‖².
pub fn path_objective(traj: &[JointState]) -> f64 {
    traj.windows(2).map(|w| (&w[1] - &w[0]).norm_squared()).sum()
}

/// Σ‖θ_t − θ_{t−1}‖, the reported path length.
pub fn path_length(traj: &[JointState]) -> f64 {
    traj.windows(2).map(|w| (&w[1] - &w[0]).norm()).sum()
}

/// Which constraints a solve carries.
#[derive(Debug, Clone, Default)]
pub(crate) struct Variant {
    /// Risk rows and allocation variables.
    pub risk: bool,
    /// Per-`[t][obstacle]` margins replacing the problem's scalar margin.
    pub margins: Option<Vec<Vec<f64>>>,
}

impl Variant {
    pub(crate) fn chance_constrained() -> Self {
        Self {
            risk: true,
            margins: None,
        }
    }

    fn margin(&self, problem: &TrajectoryProblem, t: usize, o: usize) -> f64 {
        self.margins.as_ref().map_or(problem.margin, |m| m[t][o])
    }
}

/// Signed distance from one robot shape to a nominal obstacle.
#[derive(Debug, Clone)]
struct ShapeDistance {
    sd: f64,
    gradient: DVector<f64>,
}

#[derive(Debug, Clone)]
struct PairEval {
    cert: Option<RiskCertificate>,
    /// None when saturated or not certified.
    risk_gradient: Option<DVector<f64>>,
    distances: Vec<ShapeDistance>,
}

impl PairEval {
    fn risk(&self) -> f64 {
        self.cert.as_ref().map_or(0.0, |c| c.eps_prime)
    }

    fn min_distance(&self) -> f64 {
        self.distances.iter().map(|d| d.sd).fold(f64::INFINITY, f64::min)
    }
}

/// Everything the convexification needs at one trajectory, `[t][obstacle]`.
#[derive(Debug, Clone)]
struct Evaluation {
    pairs: Vec<Vec<PairEval>>,
}

fn evaluate(problem: &TrajectoryProblem, traj: &[JointState], eps_tol: f64, certify: bool) -> Result<Evaluation> {
    let robot = &problem.robot;
    let pairs = traj
        .par_iter()
        .map(|theta| {
            let chain = robot.chain_state(theta)?;
            let shapes = robot.posed_shapes(theta)?;
            problem
                .obstacles
                .iter()
                .map(|obstacle| {
                    let distances = shapes
                        .iter()
                        .map(|shape| {
                            let d = distance_estimate(&shape.body, &obstacle.nominal, DISTANCE_TOLERANCE)?;
                            let jac = jacobian_from_chain(robot, &chain, shape.link, &d.witness_a)?;
                            Ok(ShapeDistance {
                                sd: d.signed_distance,
                                gradient: -(jac.transpose() * d.normal),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let (cert, risk_gradient) = if certify {
                        let cert = risk::certify_posed(&shapes, obstacle, eps_tol)?;
                        let g = if cert.saturated {
                            None
                        } else {
                            Some(risk::gradient_from_chain(&cert, robot, &chain)?)
                        };
                        (Some(cert), g)
                    } else {
                        (None, None)
                    };
                    Ok(PairEval {
                        cert,
                        risk_gradient,
                        distances,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation { pairs })
}

fn report(problem: &TrajectoryProblem, variant: &Variant, eval: &Evaluation, alloc: &[f64]) -> ViolationReport {
    let signed_distances: Vec<Vec<f64>> = eval
        .pairs
        .iter()
        .map(|row| row.iter().map(PairEval::min_distance).collect())
        .collect();
    let risks: Vec<Vec<f64>> = eval.pairs.iter().map(|row| row.iter().map(PairEval::risk).collect()).collect();
    let saturated = eval
        .pairs
        .iter()
        .map(|row| row.iter().map(|p| p.cert.as_ref().is_some_and(|c| c.saturated)).collect())
        .collect();
    let step_risks: Vec<f64> = risks.iter().map(|r| r.iter().sum()).collect();
    let risk_residuals: Vec<f64> = step_risks.iter().zip(alloc).map(|(r, d)| r - d).collect();
    let allocation_residual = alloc.iter().sum::<f64>() - problem.budget;
    let mut margin_residual = f64::NEG_INFINITY;
    let free = signed_distances.len().saturating_sub(1);
    for (t, row) in signed_distances.iter().enumerate().take(free).skip(1) {
        for (o, sd) in row.iter().enumerate() {
            margin_residual = margin_residual.max(variant.margin(problem, t, o) - sd);
        }
    }
    let mut max_violation = margin_residual.max(0.0);
    if variant.risk {
        max_violation = risk_residuals
            .iter()
            .fold(max_violation, |m, &r| m.max(r))
            .max(allocation_residual);
    }
    ViolationReport {
        total_risk: step_risks.iter().sum(),
        signed_distances,
        risks,
        saturated,
        step_risks,
        risk_residuals,
        allocation_residual,
        margin_residual,
        max_violation,
    }
}

/// Fresh certificates and signed distances along a trajectory.
pub fn evaluate_constraints(
    problem: &TrajectoryProblem,
    trajectory: &[JointState],
    allocation: &[f64],
    eps_tol: f64,
) -> Result<ViolationReport> {
    if trajectory.len() != problem.timesteps || allocation.len() != problem.timesteps {
        return Err(Error::domain(format!(
            "expected {} timesteps, got a trajectory of {} and an allocation of {}",
            problem.timesteps,
            trajectory.len(),
            allocation.len()
        )));
    }
    let eval = evaluate(problem, trajectory, eps_tol, true)?;
    Ok(report(problem, &Variant::chance_constrained(), &eval, allocation))
}

/// Exact penalty merit: path objective plus μ times the summed violations,
/// with risk rows measured in units of the budget.
fn true_merit(
    problem: &TrajectoryProblem,
    variant: &Variant,
    traj: &[JointState],
    alloc: &[f64],
    eval: &Evaluation,
    mu: f64,
) -> f64 {
    let mut violation = 0.0;
    for (t, row) in eval.pairs.iter().enumerate() {
        for (o, pair) in row.iter().enumerate() {
            let margin = variant.margin(problem, t, o);
            violation += pair.distances.iter().map(|d| (margin - d.sd).max(0.0)).sum::<f64>();
        }
        if variant.risk {
            let risk: f64 = row.iter().map(PairEval::risk).sum();
            violation += (risk - alloc[t]).max(0.0) / problem.budget;
        }
    }
    path_objective(traj) + mu * violation
}

/// Budget the allocation row enforces. Each risk row may end up to eps_tol
/// above its δ_t (the resolution of the certificate search), so T·eps_tol is
/// held back to keep the certified total within Δ.
pub(crate) fn planning_budget(problem: &TrajectoryProblem, config: &ScoConfig) -> f64 {
    problem.budget - problem.timesteps as f64 * config.eps_tol
}

fn satisfied(variant: &Variant, config: &ScoConfig, r: &ViolationReport) -> bool {
    let margins = r.margin_residual <= config.constraint_tolerance;
    if !variant.risk {
        return margins;
    }
    margins && r.risk_residuals.iter().all(|&v| v <= config.eps_tol) && r.allocation_residual <= 1e-12
}

/// Plans with the chance constraints and risk allocation.
pub fn solve(problem: &TrajectoryProblem, config: &ScoConfig) -> Result<PlanResult> {
    solve_variant(problem, config, &Variant::chance_constrained())
}

pub(crate) fn solve_variant(problem: &TrajectoryProblem, config: &ScoConfig, variant: &Variant) -> Result<PlanResult> {
    config.validate()?;
    if let Some(m) = &variant.margins {
        if m.len() != problem.timesteps || m.iter().any(|r| r.len() != problem.obstacles.len()) {
            return Err(Error::domain("margin table must be timesteps × obstacles"));
        }
    }
    if variant.risk && planning_budget(problem, config) <= 0.0 {
        return Err(Error::domain(format!(
            "risk budget {} does not exceed timesteps × epsTol = {}",
            problem.budget,
            problem.timesteps as f64 * config.eps_tol
        )));
    }
    let (mut traj, mut alloc) = seed_trajectory(problem);
    if !variant.risk {
        alloc = vec![0.0; problem.timesteps];
    }
    let mut eval = evaluate(problem, &traj, config.eps_tol, variant.risk)?;
    let mut mu = config.mu_initial;
    let mut radius = config.radius_initial;
    let mut log = Vec::new();
    let mut status = PlanStatus::IterationLimit;
    let qp_tol = QpTolerances::default();
    let mut iteration = 0;

    'outer: for _ in 0..config.max_outer {
        for _ in 0..config.max_inner {
            iteration += 1;
            let model = Model::build(problem, config, variant, &traj, &alloc, &eval, mu, radius)?;
            let sol = solve_qp_warm(&model.qp, &qp_tol, Some(&model.start()))?;
            let old = true_merit(problem, variant, &traj, &alloc, &eval, mu);
            if sol.status != QpStatus::Optimal {
                radius *= config.radius_shrink;
                log.push(record(iteration, mu, radius, &traj, &alloc, problem, variant, &eval, false, f64::NAN));
                if radius < config.radius_min {
                    break;
                }
                continue;
            }
            let (mut cand_traj, cand_alloc) = model.unpack(&sol.z);
            cand_traj[0] = problem.start.clone();
            cand_traj[problem.timesteps - 1] = problem.goal.clone();
            let predicted = model.merit(&model.start().z) - model.merit(&sol.z);
            if predicted <= 1e-9 * (1.0 + old.abs()) {
                log.push(record(iteration, mu, radius, &traj, &alloc, problem, variant, &eval, false, 0.0));
                break;
            }
            let cand_eval = evaluate(problem, &cand_traj, config.eps_tol, variant.risk)?;
            let new = true_merit(problem, variant, &cand_traj, &cand_alloc, &cand_eval, mu);
            let ratio = (old - new) / predicted;
            if ratio >= config.improve_ratio {
                traj = cand_traj;
                alloc = cand_alloc;
                eval = cand_eval;
                radius *= config.radius_expand;
                log.push(record(iteration, mu, radius, &traj, &alloc, problem, variant, &eval, true, ratio));
                if old - new <= config.objective_tolerance {
                    break;
                }
            } else {
                radius *= config.radius_shrink;
                log.push(record(iteration, mu, radius, &traj, &alloc, problem, variant, &eval, false, ratio));
                if radius < config.radius_min {
                    break;
                }
            }
        }
        let r = report(problem, variant, &eval, &alloc);
        if satisfied(variant, config, &r) {
            status = PlanStatus::Converged;
            break 'outer;
        }
        if mu * config.mu_growth > config.mu_max {
            status = PlanStatus::Infeasible;
            break 'outer;
        }
        mu *= config.mu_growth;
        radius = radius.max(0.1 * config.radius_initial);
    }

    let report_eval = if variant.risk {
        eval
    } else {
        // baselines still report the certified risk they run
        evaluate(problem, &traj, config.eps_tol, true)?
    };
    let final_report = report(problem, variant, &report_eval, &alloc);
    Ok(PlanResult {
        objective: path_objective(&traj),
        risks: final_report.step_risks.clone(),
        trajectory: traj,
        allocation: alloc,
        status,
        log,
        report: final_report,
    })
}

#[allow(clippy::too_many_arguments)]
fn record(
    iteration: usize,
    mu: f64,
    radius: f64,
    traj: &[JointState],
    alloc: &[f64],
    problem: &TrajectoryProblem,
    variant: &Variant,
    eval: &Evaluation,
    accepted: bool,
    ratio: f64,
) -> IterationRecord {
    IterationRecord {
        iteration,
        mu,
        radius,
        objective: path_objective(traj),
        merit: true_merit(problem, variant, traj, alloc, eval, mu),
        max_violation: report(problem, variant, eval, alloc).max_violation,
        allocation_sum: alloc.iter().sum(),
        accepted,
        ratio,
    }
}

#[cfg(test)]
mod tests;
