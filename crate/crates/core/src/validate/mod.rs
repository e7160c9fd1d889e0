//! Monte Carlo ground truth and the two baseline planners.
//!
//! Obstacle displacements are drawn once per sample and held fixed along the
//! whole trajectory. Each (seed, sample, obstacle) triple owns its own ChaCha
//! stream, so results do not depend on how rayon splits the work.

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{intersects, ConvexBody, Vec3};
use crate::kinematics::{JointState, PosedShape, RobotModel};
use crate::planner::{solve_variant, PlanResult, ScoConfig, TrajectoryProblem, Variant};
use crate::risk::UncertainObstacle;

/// GJK tolerance for hit and membership tests (m).
const CONTACT_TOLERANCE: f64 = 1e-9;
/// Fixed containment directions in 3D and in the plane.
pub const CONTAINMENT_DIRECTIONS_3D: usize = 64;
pub const CONTAINMENT_DIRECTIONS_2D: usize = 32;
/// Margin growth per IRA round, in units of σ_max.
pub const IRA_MARGIN_STEP: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MonteCarloReport {
    pub sample_count: u64,
    pub hit_count: u64,
    pub estimate: f64,
    pub standard_error: f64,
    pub seed: u64,
    /// Support directions per containment test, when that is what was sampled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub directions: Option<usize>,
}

impl MonteCarloReport {
    fn new(sample_count: u64, hit_count: u64, seed: u64, directions: Option<usize>) -> Self {
        let p = hit_count as f64 / sample_count as f64;
        Self {
            sample_count,
            hit_count,
            estimate: p,
            standard_error: (p * (1.0 - p) / sample_count as f64).sqrt(),
            seed,
            directions,
        }
    }
}

fn check_samples(n: u64) -> Result<()> {
    if n == 0 {
        return Err(Error::domain("sample count must be at least 1"));
    }
    Ok(())
}

/// Displacement of obstacle `o` in sample `i`.
fn displacement(obstacle: &UncertainObstacle, seed: u64, sample: u64, o: usize) -> Vec3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((sample << 16) | o as u64);
    let mut z = Vec3::zeros();
    for k in 0..obstacle.covariance.dim().get() {
        z[k] = StandardNormal.sample(&mut rng);
    }
    obstacle.covariance.transform_standard(&z)
}

fn check_obstacle_count(obstacles: &[UncertainObstacle]) -> Result<()> {
    if obstacles.len() >= 1 << 16 {
        return Err(Error::domain("at most 65535 obstacles per scene"));
    }
    Ok(())
}

/// A ball enclosing `body`, when one is cheap to get.
fn bounding_ball(body: &ConvexBody) -> Option<(Vec3, f64)> {
    match body {
        ConvexBody::Sphere { center, radius } => Some((*center, *radius)),
        ConvexBody::Polytope { vertices } => {
            let c = body.interior_point();
            let r = vertices.iter().map(|v| (v - c).norm()).fold(0.0, f64::max);
            Some((c, r))
        }
        ConvexBody::Capsule { a, b, radius } => Some((0.5 * (a + b), 0.5 * (b - a).norm() + radius)),
        ConvexBody::Ellipsoid(e) => Some((Vec3::zeros(), e.squared_radius.sqrt() * e.covariance.sigma_max())),
        ConvexBody::HalfEllipsoid(h) => Some((
            Vec3::zeros(),
            h.ellipsoid.squared_radius.sqrt() * h.ellipsoid.covariance.sigma_max(),
        )),
        ConvexBody::Posed { pose, body } => {
            bounding_ball(body).map(|(c, r)| (pose.transform_point(&c.into()).coords, r))
        }
        ConvexBody::Linear { map, body } => bounding_ball(body).map(|(c, r)| (map * c, r * map.norm())),
        ConvexBody::MinkowskiSum(a, b) => {
            let (ca, ra) = bounding_ball(a)?;
            let (cb, rb) = bounding_ball(b)?;
            Some((ca + cb, ra + rb))
        }
    }
}

struct Shape {
    body: ConvexBody,
    ball: Option<(Vec3, f64)>,
}

struct Obstacle<'a> {
    source: &'a UncertainObstacle,
    ball: Option<(Vec3, f64)>,
}

fn may_touch(a: Option<(Vec3, f64)>, b: Option<(Vec3, f64)>, offset: &Vec3) -> bool {
    match (a, b) {
        (Some((ca, ra)), Some((cb, rb))) => (cb + offset - ca).norm() <= ra + rb + CONTACT_TOLERANCE,
        _ => true,
    }
}

/// Hits per sample: for each obstacle, the timesteps at which it is struck.
struct Sampler<'a> {
    steps: Vec<Vec<Shape>>,
    obstacles: Vec<Obstacle<'a>>,
}

impl<'a> Sampler<'a> {
    fn new(robot: &RobotModel, trajectory: &[JointState], obstacles: &'a [UncertainObstacle]) -> Result<Self> {
        check_obstacle_count(obstacles)?;
        let steps = trajectory
            .iter()
            .map(|theta| {
                Ok(robot
                    .posed_shapes(theta)?
                    .into_iter()
                    .map(|PosedShape { body, .. }| Shape {
                        ball: bounding_ball(&body),
                        body,
                    })
                    .collect())
            })
            .collect::<Result<Vec<Vec<Shape>>>>()?;
        let obstacles = obstacles
            .iter()
            .map(|o| Obstacle {
                source: o,
                ball: bounding_ball(&o.nominal),
            })
            .collect();
        Ok(Self { steps, obstacles })
    }

    fn hits_at(&self, t: usize, o: usize, d: &Vec3, displaced: &ConvexBody) -> Result<bool> {
        let ob = &self.obstacles[o];
        for shape in &self.steps[t] {
            if may_touch(shape.ball, ob.ball, d) && intersects(&shape.body, displaced, CONTACT_TOLERANCE)? {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Whether sample `i` hits anything, stopping at the first contact.
    fn any_hit(&self, seed: u64, i: u64) -> Result<bool> {
        for (o, ob) in self.obstacles.iter().enumerate() {
            let d = displacement(ob.source, seed, i, o);
            let displaced = ConvexBody::translated(ob.source.nominal.clone(), d);
            for t in 0..self.steps.len() {
                if self.hits_at(t, o, &d, &displaced)? {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    /// Per-`[t][obstacle]` hit flags of sample `i`.
    fn pair_hits(&self, seed: u64, i: u64) -> Result<Vec<Vec<bool>>> {
        let mut hits = vec![vec![false; self.obstacles.len()]; self.steps.len()];
        for (o, ob) in self.obstacles.iter().enumerate() {
            let d = displacement(ob.source, seed, i, o);
            let displaced = ConvexBody::translated(ob.source.nominal.clone(), d);
            for (t, row) in hits.iter_mut().enumerate() {
                row[o] = self.hits_at(t, o, &d, &displaced)?;
            }
        }
        Ok(hits)
    }
}

/// Fraction of displacement samples in which any timestep of `trajectory`
/// touches any displaced obstacle.
pub fn monte_carlo_risk(
    robot: &RobotModel,
    trajectory: &[JointState],
    obstacles: &[UncertainObstacle],
    n: u64,
    seed: u64,
) -> Result<MonteCarloReport> {
    check_samples(n)?;
    let sampler = Sampler::new(robot, trajectory, obstacles)?;
    let hits = (0..n)
        .into_par_iter()
        .map(|i| sampler.any_hit(seed, i).map(u64::from))
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(MonteCarloReport::new(n, hits, seed, None))
}

/// Joint hit count and per-`[t][obstacle]` hit counts.
fn pair_risk(
    robot: &RobotModel,
    trajectory: &[JointState],
    obstacles: &[UncertainObstacle],
    n: u64,
    seed: u64,
) -> Result<(u64, Vec<Vec<u64>>)> {
    let sampler = Sampler::new(robot, trajectory, obstacles)?;
    let zero = || (0u64, vec![vec![0u64; obstacles.len()]; trajectory.len()]);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let hits = sampler.pair_hits(seed, i)?;
            let any = hits.iter().flatten().any(|&h| h);
            let counts = hits.iter().map(|r| r.iter().map(|&h| u64::from(h)).collect()).collect();
            Ok((u64::from(any), counts))
        })
        .try_reduce(zero, |(a, mut ca), (b, cb)| {
            for (ra, rb) in ca.iter_mut().zip(&cb) {
                for (x, y) in ra.iter_mut().zip(rb) {
                    *x += y;
                }
            }
            Ok((a + b, ca))
        })
}

/// Fixed, evenly spread unit directions: a Fibonacci sphere in 3D, a regular
/// polygon in the plane.
pub fn containment_directions(dim: usize) -> Vec<Vec3> {
    if dim == 2 {
        let k = CONTAINMENT_DIRECTIONS_2D;
        return (0..k)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / k as f64;
                Vec3::new(a.cos(), a.sin(), 0.0)
            })
            .collect();
    }
    let k = CONTAINMENT_DIRECTIONS_3D;
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..k)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / k as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            Vec3::new(r * a.cos(), r * a.sin(), z)
        })
        .collect()
}

/// Fraction of sampled displaced obstacles lying inside `body`, judged by
/// support functions: O + d ⊆ S when h_O(u) + u·d ≤ h_S(u) for every probed u.
///
/// Besides the fixed directions, each sample also probes Σ⁻¹d, the outward
/// normal of the displacement's own Mahalanobis level set.
pub fn monte_carlo_containment(
    obstacle: &UncertainObstacle,
    body: &ConvexBody,
    n: u64,
    seed: u64,
) -> Result<MonteCarloReport> {
    check_samples(n)?;
    let dim = obstacle.covariance.dim().get();
    let fixed = containment_directions(dim);
    let slack = |u: &Vec3| -> Result<f64> { Ok((body.support(u)? - obstacle.nominal.support(u)?).dot(u)) };
    let room = fixed.iter().map(slack).collect::<Result<Vec<f64>>>()?;
    let precision: Matrix3<f64> = *obstacle.covariance.precision();
    let hits = (0..n)
        .into_par_iter()
        .map(|i| {
            let d = displacement(obstacle, seed, i, 0);
            if fixed.iter().zip(&room).any(|(u, r)| u.dot(&d) > r + CONTACT_TOLERANCE) {
                return Ok(0);
            }
            let normal = precision * d;
            if normal.norm() > 0.0 {
                let u = normal.normalize();
                if u.dot(&d) > slack(&u)? + CONTACT_TOLERANCE {
                    return Ok(0);
                }
            }
            Ok(1u64)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(MonteCarloReport::new(n, hits, seed, Some(fixed.len() + 1)))
}

/// Plans against nominal geometry only: margin rows, no risk rows.
pub fn risk_blind_plan(problem: &TrajectoryProblem, config: &ScoConfig) -> Result<PlanResult> {
    solve_variant(
        problem,
        config,
        &Variant {
            risk: false,
            margins: None,
        },
    )
}

/// Iterative risk allocation: deterministic solves whose per-pair margins
/// grow by half the obstacle's largest standard deviation wherever the
/// sampled risk of a (timestep, obstacle) pair exceeds its even share of Δ.
pub fn ira_plan(
    problem: &TrajectoryProblem,
    config: &ScoConfig,
    sample_count: u64,
    max_rounds: usize,
    seed: u64,
) -> Result<PlanResult> {
    check_samples(sample_count)?;
    if max_rounds == 0 {
        return Err(Error::domain("IRA needs at least one round"));
    }
    let big_t = problem.timesteps;
    let n_obs = problem.obstacles.len();
    let mut margins = vec![vec![problem.margin; n_obs]; big_t];
    let share = problem.budget / (big_t * n_obs.max(1)) as f64;
    let mut round = 0;
    loop {
        let variant = Variant {
            risk: false,
            margins: Some(margins.clone()),
        };
        let result = solve_variant(problem, config, &variant)?;
        round += 1;
        let round_seed = seed.wrapping_add(round as u64);
        let (joint, pairs) = pair_risk(&problem.robot, &result.trajectory, &problem.obstacles, sample_count, round_seed)?;
        if joint as f64 / sample_count as f64 <= problem.budget || round >= max_rounds {
            return Ok(result);
        }
        // endpoints are fixed, their margins cannot buy anything
        let interior = 1..big_t.saturating_sub(1);
        let over: Vec<(usize, usize)> = interior
            .clone()
            .flat_map(|t| (0..n_obs).map(move |o| (t, o)))
            .filter(|&(t, o)| pairs[t][o] as f64 / sample_count as f64 > share)
            .collect();
        let grow: Vec<(usize, usize)> = if over.is_empty() {
            interior
                .flat_map(|t| (0..n_obs).map(move |o| (t, o)))
                .filter(|&(t, o)| pairs[t][o] > 0)
                .collect()
        } else {
            over
        };
        for (t, o) in grow {
            margins[t][o] += IRA_MARGIN_STEP * problem.obstacles[o].covariance.sigma_max();
        }
    }
}

#[cfg(test)]
mod tests;
