use nalgebra::DVector;

use super::*;
use crate::geometry::{ConvexBody, Covariance, Vec3};
use crate::qp::solve_qp;

fn q(v: &[f64]) -> JointState {
    DVector::from_row_slice(v)
}

fn point_obstacle(center: Vec3, sigma: f64) -> UncertainObstacle {
    UncertainObstacle::new(
        "p",
        ConvexBody::point(center).unwrap(),
        Covariance::isotropic(2, sigma).unwrap(),
    )
}

fn planar(obstacles: Vec<UncertainObstacle>, t: usize, start: &[f64], goal: &[f64], budget: f64) -> TrajectoryProblem {
    let robot = RobotModel::planar_point(0.0, 5.0).unwrap();
    TrajectoryProblem::new(robot, obstacles, t, q(start), q(goal), budget, 0.0).unwrap()
}

#[test]
fn seeds_are_straight_lines() {
    let p = planar(vec![], 2, &[0.0, 0.0], &[1.0, 2.0], 0.1);
    let (traj, alloc) = seed_trajectory(&p);
    assert_eq!(traj, vec![q(&[0.0, 0.0]), q(&[1.0, 2.0])]);
    assert_eq!(alloc, vec![0.05, 0.05]);

    let p = planar(vec![], 3, &[0.0, 0.0], &[1.0, 1.0], 0.1);
    assert_eq!(seed_trajectory(&p).0[1], q(&[0.5, 0.5]));

    let p = planar(vec![], 7, &[-1.0, 0.5], &[2.0, -1.0], 0.1);
    let (traj, _) = seed_trajectory(&p);
    let step = &traj[1] - &traj[0];
    for w in traj.windows(2) {
        assert!((&w[1] - &w[0] - &step).amax() < 1e-12);
    }
}

#[test]
fn problem_validation() {
    let robot = RobotModel::planar_point(0.0, 1.0).unwrap();
    let ok = |t, budget, margin, goal: &[f64]| {
        TrajectoryProblem::new(robot.clone(), vec![], t, q(&[0.0, 0.0]), q(goal), budget, margin)
    };
    assert!(ok(3, 0.1, 0.0, &[0.5, 0.5]).is_ok());
    assert!(ok(1, 0.1, 0.0, &[0.5, 0.5]).is_err());
    assert!(ok(3, 0.0, 0.0, &[0.5, 0.5]).is_err());
    assert!(ok(3, 1.0, 0.0, &[0.5, 0.5]).is_err());
    assert!(ok(3, 0.1, -0.1, &[0.5, 0.5]).is_err());
    assert!(ok(3, 0.1, 0.0, &[1.5, 0.5]).is_err());
    assert!(ok(3, 0.1, 0.0, &[0.5]).is_err());
}

#[test]
fn config_validation_and_defaults() {
    let c = ScoConfig::default();
    assert!(c.validate().is_ok());
    assert_eq!((c.mu_initial, c.mu_growth, c.mu_max), (10.0, 10.0, 1e6));
    assert_eq!((c.radius_initial, c.radius_expand, c.radius_shrink, c.radius_min), (0.3, 1.5, 0.25, 1e-4));
    assert!(ScoConfig { mu_growth: 1.0, ..c }.validate().is_err());
    assert!(ScoConfig { radius_min: 0.0, ..c }.validate().is_err());
    let parsed: ScoConfig = serde_json::from_str(r#"{"muInitial": 5.0}"#).unwrap();
    assert_eq!(parsed.mu_initial, 5.0);
    assert!(serde_json::from_str::<ScoConfig>(r#"{"mu": 5.0}"#).is_err());
}

#[test]
fn obstacle_free_returns_the_straight_line() {
    let p = planar(vec![], 6, &[-1.0, 0.2], &[1.0, -0.4], 0.05);
    let r = solve(&p, &ScoConfig::default()).unwrap();
    assert_eq!(r.status, PlanStatus::Converged);
    let (seed, _) = seed_trajectory(&p);
    for (a, b) in r.trajectory.iter().zip(&seed) {
        assert!((a - b).amax() < 1e-6);
    }
    let straight = (&p.goal - &p.start).norm_squared() / 5.0;
    assert!((r.objective - straight).abs() < 1e-9);
    assert_eq!(r.report.max_violation, 0.0);
}

#[test]
fn allocation_residual_and_saturated_seed() {
    let o = UncertainObstacle::new(
        "box",
        ConvexBody::cuboid(Vec3::new(0.2, 0.2, 0.0)).unwrap(),
        Covariance::isotropic(2, 0.05).unwrap(),
    );
    let p = planar(vec![o], 5, &[-1.0, 0.0], &[1.0, 0.0], 0.02);
    let (traj, _) = seed_trajectory(&p);
    let alloc = vec![1.5 * p.budget / 5.0; 5];
    let r = evaluate_constraints(&p, &traj, &alloc, 1e-6).unwrap();
    assert!((r.allocation_residual - 0.5 * p.budget).abs() < 1e-15);
    assert!(r.saturated[2][0]);
    assert_eq!(r.risks[2][0], 1.0);
    assert!(r.signed_distances[2][0] < 0.0);
    assert!(r.margin_residual > 0.0);
    assert!(evaluate_constraints(&p, &traj[..4], &alloc, 1e-6).is_err());
}

#[test]
fn risk_row_moves_the_waypoint_away() {
    let p = planar(vec![point_obstacle(Vec3::new(0.0, 0.3, 0.0), 0.1)], 3, &[-0.5, 0.0], &[0.5, 0.0], 0.001);
    let (traj, alloc) = seed_trajectory(&p);
    let config = ScoConfig::default();
    let qp = convexify(&p, &traj, &alloc, &config, 10.0, 0.3).unwrap();
    let z = solve_qp(&qp, &QpTolerances::default()).unwrap().z;
    // θ₁ = (z[2], z[3]) escapes along −y
    assert!(z[3] < -1e-3, "y = {}", z[3]);
    assert!(z[2].abs() < 1e-6);
}

#[test]
fn point_obstacle_plan_respects_closed_form_risk() {
    let sigma = 0.1;
    let center = Vec3::new(0.0, 0.2, 0.0);
    let p = planar(vec![point_obstacle(center, sigma)], 5, &[-1.0, 0.0], &[1.0, 0.0], 0.01);
    let r = solve(&p, &ScoConfig::default()).unwrap();
    assert_eq!(r.status, PlanStatus::Converged, "{:?}", r.log);
    let total: f64 = r.risks.iter().sum();
    assert!(total <= p.budget + 1e-6, "total {total}");
    for (theta, risk) in r.trajectory.iter().zip(&r.risks) {
        let d2 = (theta[0] - center.x).powi(2) + (theta[1] - center.y).powi(2);
        let closed = (-d2 / (2.0 * sigma * sigma)).exp();
        assert!(*risk <= closed.max(1e-6) + 1e-9, "{risk} > {closed}");
    }
    assert!(r.allocation.iter().all(|&d| d >= 0.0));
    assert!(r.allocation.iter().sum::<f64>() <= p.budget);
    assert_eq!(r.trajectory[0], p.start);
    assert_eq!(r.trajectory[4], p.goal);
    let straight = (&p.goal - &p.start).norm_squared() / 4.0;
    assert!(r.objective >= straight);
    // the straight line itself is over budget
    let (seed, alloc) = seed_trajectory(&p);
    assert!(evaluate_constraints(&p, &seed, &alloc, 1e-6).unwrap().total_risk > p.budget);
}

#[test]
fn allocation_peaks_at_closest_approach() {
    let obstacles = vec![
        UncertainObstacle::new(
            "upper",
            ConvexBody::translated(ConvexBody::cuboid(Vec3::new(0.15, 0.1, 0.0)).unwrap(), Vec3::new(0.1, 0.38, 0.0)),
            Covariance::from_row_major(2, &[0.01, 0.0, 0.0, 0.0025]).unwrap(),
        ),
        UncertainObstacle::new(
            "lower",
            ConvexBody::translated(ConvexBody::cuboid(Vec3::new(0.15, 0.1, 0.0)).unwrap(), Vec3::new(0.1, -0.38, 0.0)),
            Covariance::from_row_major(2, &[0.0025, 0.001, 0.001, 0.006]).unwrap(),
        ),
    ];
    let robot = RobotModel::planar_point(0.05, 5.0).unwrap();
    let p = TrajectoryProblem::new(robot, obstacles, 10, q(&[-1.0, 0.0]), q(&[1.0, 0.0]), 0.01, 0.0).unwrap();
    let r = solve(&p, &ScoConfig::default()).unwrap();
    assert_eq!(r.status, PlanStatus::Converged);
    let closest = (0..10)
        .min_by(|&a, &b| {
            let da = r.report.signed_distances[a].iter().copied().fold(f64::INFINITY, f64::min);
            let db = r.report.signed_distances[b].iter().copied().fold(f64::INFINITY, f64::min);
            da.total_cmp(&db)
        })
        .unwrap();
    let peak = (0..10).max_by(|&a, &b| r.allocation[a].total_cmp(&r.allocation[b])).unwrap();
    assert_eq!(peak, closest, "allocation {:?}", r.allocation);
    assert!(r.allocation[peak] > 2.0 * r.allocation[0]);
}

#[test]
fn merit_never_increases_at_fixed_penalty() {
    let p = planar(vec![point_obstacle(Vec3::new(0.05, 0.1, 0.0), 0.1)], 8, &[-1.0, 0.0], &[1.0, 0.0], 0.02);
    let r = solve(&p, &ScoConfig::default()).unwrap();
    for w in r.log.windows(2) {
        if w[0].mu == w[1].mu {
            assert!(w[1].merit <= w[0].merit + 1e-12, "{:?}", w);
        }
    }
    assert!(r.log.iter().any(|rec| rec.accepted));
}
