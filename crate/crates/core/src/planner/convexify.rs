use nalgebra::{DMatrix, DVector};

use super::{evaluate, path_objective, planning_budget, Evaluation, RiskAllocation, ScoConfig, Trajectory, TrajectoryProblem, Variant};
use crate::error::{Error, Result};
use crate::kinematics::JointState;
use crate::qp::{ActiveSet, QuadraticProgram, WarmStart};

/// Keeps the QP strictly convex in δ and the slacks.
const PROXIMAL_WEIGHT: f64 = 1e-6;

/// A penalized linear row: `coeffs · z − rhs ≤ slack`.
#[derive(Debug, Clone)]
struct Row {
    coeffs: Vec<(usize, f64)>,
    rhs: f64,
}

impl Row {
    fn value(&self, z: &DVector<f64>) -> f64 {
        self.coeffs.iter().map(|&(j, c)| c * z[j]).sum::<f64>() - self.rhs
    }
}

/// Variable layout `[θ₀ … θ_{T−1}, δ₀ … δ_{T−1}, slacks]`, δ only when the
/// variant carries risk rows.
#[derive(Debug, Clone, Copy)]
struct Layout {
    timesteps: usize,
    dof: usize,
    risk: bool,
    rows: usize,
}

impl Layout {
    fn theta(&self, t: usize, j: usize) -> usize {
        t * self.dof + j
    }
    fn delta(&self, t: usize) -> usize {
        self.timesteps * self.dof + t
    }
    fn slack(&self, r: usize) -> usize {
        self.timesteps * self.dof + if self.risk { self.timesteps } else { 0 } + r
    }
    fn dim(&self) -> usize {
        self.slack(self.rows)
    }
}

/// The convex subproblem at one anchor trajectory.
#[derive(Debug, Clone)]
pub(super) struct Model {
    pub qp: QuadraticProgram,
    layout: Layout,
    rows: Vec<Row>,
    anchor: DVector<f64>,
    mu: f64,
}

impl Model {
    #[allow(clippy::too_many_arguments)]
    pub(super) fn build(
        problem: &TrajectoryProblem,
        config: &ScoConfig,
        variant: &Variant,
        traj: &[JointState],
        alloc: &[f64],
        eval: &Evaluation,
        mu: f64,
        radius: f64,
    ) -> Result<Self> {
        let big_t = problem.timesteps;
        let dof = problem.dof();
        let mut rows = Vec::new();

        // margin rows: margin − sd₀ − g·(θ_t − θ_t0) ≤ s
        for t in 1..big_t - 1 {
            for (o, pair) in eval.pairs[t].iter().enumerate() {
                let margin = variant.margin(problem, t, o);
                for d in &pair.distances {
                    if d.sd >= margin + config.distance_activation {
                        continue;
                    }
                    let g = &d.gradient;
                    let coeffs = (0..dof).map(|j| (t * dof + j, -g[j])).collect();
                    rows.push(Row {
                        coeffs,
                        rhs: d.sd - margin - g.dot(&traj[t]),
                    });
                }
            }
        }

        // risk rows: (Σ_O [ε + ∇ε·(θ_t − θ_t0)] − δ_t)/Δ ≤ s
        if variant.risk {
            let scale = 1.0 / problem.budget;
            for (t, row) in eval.pairs.iter().enumerate() {
                let mut grad = DVector::zeros(dof);
                let mut constant = 0.0;
                for pair in row {
                    let (Some(cert), Some(g)) = (&pair.cert, &pair.risk_gradient) else {
                        continue;
                    };
                    grad += g;
                    constant += cert.eps_prime - g.dot(&traj[t]);
                }
                let mut coeffs: Vec<(usize, f64)> = (0..dof).map(|j| (t * dof + j, scale * grad[j])).collect();
                coeffs.push((big_t * dof + t, -scale));
                rows.push(Row {
                    coeffs,
                    rhs: -scale * constant,
                });
            }
        }

        let layout = Layout {
            timesteps: big_t,
            dof,
            risk: variant.risk,
            rows: rows.len(),
        };
        let n = layout.dim();

        let mut anchor = DVector::zeros(n);
        for (t, q) in traj.iter().enumerate() {
            for j in 0..dof {
                anchor[layout.theta(t, j)] = q[j];
            }
            if variant.risk {
                anchor[layout.delta(t)] = alloc[t];
            }
        }
        for (r, row) in rows.iter().enumerate() {
            anchor[layout.slack(r)] = row.value(&anchor).max(0.0);
        }

        let mut h = DMatrix::identity(n, n) * PROXIMAL_WEIGHT;
        for t in 1..big_t {
            for j in 0..dof {
                let (a, b) = (layout.theta(t - 1, j), layout.theta(t, j));
                h[(a, a)] += 2.0;
                h[(b, b)] += 2.0;
                h[(a, b)] -= 2.0;
                h[(b, a)] -= 2.0;
            }
        }
        let mut f = -&anchor * PROXIMAL_WEIGHT;
        for r in 0..rows.len() {
            f[layout.slack(r)] += mu;
        }

        let n_ineq = rows.len() + usize::from(variant.risk);
        let mut a = DMatrix::zeros(n_ineq, n);
        let mut b = DVector::zeros(n_ineq);
        for (r, row) in rows.iter().enumerate() {
            for &(j, c) in &row.coeffs {
                a[(r, j)] += c;
            }
            a[(r, layout.slack(r))] = -1.0;
            b[r] = row.rhs;
        }
        if variant.risk {
            let last = rows.len();
            for t in 0..big_t {
                a[(last, layout.delta(t))] = 1.0;
            }
            b[last] = planning_budget(problem, config);
        }

        let mut c = DMatrix::zeros(2 * dof, n);
        let mut d = DVector::zeros(2 * dof);
        for j in 0..dof {
            c[(j, layout.theta(0, j))] = 1.0;
            d[j] = problem.start[j];
            c[(dof + j, layout.theta(big_t - 1, j))] = 1.0;
            d[dof + j] = problem.goal[j];
        }

        let (lo, hi) = (problem.robot.lower_limits(), problem.robot.upper_limits());
        let mut lower = DVector::from_element(n, 0.0);
        let mut upper = DVector::from_element(n, f64::INFINITY);
        for t in 0..big_t {
            for j in 0..dof {
                let k = layout.theta(t, j);
                lower[k] = lo[j].max(anchor[k] - radius);
                upper[k] = hi[j].min(anchor[k] + radius);
            }
        }

        let qp = QuadraticProgram::new(h, f)
            .with_inequalities(a, b)
            .with_equalities(c, d)
            .with_bounds(lower, upper);
        Ok(Self {
            qp,
            layout,
            rows,
            anchor,
            mu,
        })
    }

    /// The anchor with slacks and empty δ pinned at zero.
    pub(super) fn start(&self) -> WarmStart {
        let l = &self.layout;
        let mut at_lower: Vec<usize> = (0..l.rows).map(|r| l.slack(r)).filter(|&k| self.anchor[k] == 0.0).collect();
        if l.risk {
            at_lower.extend((0..l.timesteps).map(|t| l.delta(t)).filter(|&k| self.anchor[k] == 0.0));
        }
        WarmStart {
            z: self.anchor.clone(),
            active: ActiveSet {
                rows: Vec::new(),
                at_lower,
                at_upper: Vec::new(),
            },
        }
    }

    pub(super) fn unpack(&self, z: &DVector<f64>) -> (Trajectory, RiskAllocation) {
        let l = &self.layout;
        let traj = (0..l.timesteps)
            .map(|t| JointState::from_fn(l.dof, |j, _| z[l.theta(t, j)]))
            .collect();
        let alloc = if l.risk {
            let raw: Vec<f64> = (0..l.timesteps).map(|t| z[l.delta(t)].max(0.0)).collect();
            let sum: f64 = raw.iter().sum();
            let budget = self.qp.b[self.rows.len()];
            // solver feasibility is 1e-9 relative; keep Σδ ≤ Δ exact
            if sum > budget {
                raw.iter().map(|v| v * budget / sum).collect()
            } else {
                raw
            }
        } else {
            vec![0.0; l.timesteps]
        };
        (traj, alloc)
    }

    /// Objective plus μ times the positive parts of the linearized rows.
    pub(super) fn merit(&self, z: &DVector<f64>) -> f64 {
        let l = &self.layout;
        let traj: Vec<JointState> = (0..l.timesteps)
            .map(|t| JointState::from_fn(l.dof, |j, _| z[l.theta(t, j)]))
            .collect();
        path_objective(&traj) + self.mu * self.rows.iter().map(|r| r.value(z).max(0.0)).sum::<f64>()
    }
}

/// Builds the convex subproblem at `trajectory` and `allocation` with
/// penalty `mu` and trust radius `radius`.
pub fn convexify(
    problem: &TrajectoryProblem,
    trajectory: &[JointState],
    allocation: &[f64],
    config: &ScoConfig,
    mu: f64,
    radius: f64,
) -> Result<QuadraticProgram> {
    config.validate()?;
    if trajectory.len() != problem.timesteps || allocation.len() != problem.timesteps {
        return Err(Error::domain("trajectory and allocation must have one entry per timestep"));
    }
    if !(mu > 0.0 && radius > 0.0) {
        return Err(Error::domain("penalty and trust radius must be positive"));
    }
    let variant = Variant::chance_constrained();
    let eval = evaluate(problem, trajectory, config.eps_tol, true)?;
    Ok(Model::build(problem, config, &variant, trajectory, allocation, &eval, mu, radius)?.qp)
}
