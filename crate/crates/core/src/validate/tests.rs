use nalgebra::DVector;

use super::*;
use crate::geometry::Covariance;
use crate::planner::{evaluate_constraints, PlanStatus};
use crate::risk::{certify_risk, shadow};

fn q(v: &[f64]) -> JointState {
    DVector::from_row_slice(v)
}

fn point_robot() -> RobotModel {
    RobotModel::planar_point(0.0, 5.0).unwrap()
}

fn disk(center: Vec3, radius: f64, sigma: f64) -> UncertainObstacle {
    UncertainObstacle::new(
        "disk",
        ConvexBody::sphere(center, radius).unwrap(),
        Covariance::isotropic(2, sigma).unwrap(),
    )
}

#[test]
fn reports_are_reproducible_and_sized() {
    let o = disk(Vec3::new(0.3, 0.0, 0.0), 0.1, 0.1);
    let traj = vec![q(&[0.0, 0.0]), q(&[0.1, 0.0])];
    let a = monte_carlo_risk(&point_robot(), &traj, &[o.clone()], 5000, 7).unwrap();
    let b = monte_carlo_risk(&point_robot(), &traj, &[o.clone()], 5000, 7).unwrap();
    assert_eq!(a, b);
    let c = monte_carlo_risk(&point_robot(), &traj, &[o.clone()], 5000, 8).unwrap();
    assert_ne!(a.hit_count, c.hit_count);
    assert!(a.estimate > 0.0 && a.estimate < 1.0);
    let se = (a.estimate * (1.0 - a.estimate) / 5000.0).sqrt();
    assert_eq!(a.standard_error, se);
    assert!(monte_carlo_risk(&point_robot(), &traj, &[o.clone()], 0, 7).is_err());
    let one = monte_carlo_risk(&point_robot(), &traj, &[o], 1, 7).unwrap();
    assert_eq!(one.standard_error, 0.0);
}

#[test]
fn worker_count_does_not_change_results() {
    let o = disk(Vec3::new(0.25, 0.05, 0.0), 0.1, 0.1);
    let traj = vec![q(&[0.0, 0.0]), q(&[0.05, 0.0]), q(&[0.1, 0.0])];
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| monte_carlo_risk(&point_robot(), &traj, &[o.clone()], 20_000, 3).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn far_and_through_trajectories() {
    let o = disk(Vec3::zeros(), 0.1, 0.05);
    let far = vec![q(&[0.7, 0.0]), q(&[0.7, 1.0])];
    assert_eq!(monte_carlo_risk(&point_robot(), &far, &[o.clone()], 100_000, 1).unwrap().hit_count, 0);
    let through = vec![q(&[-0.5, 0.0]), q(&[0.0, 0.05]), q(&[0.5, 0.0])];
    assert!(monte_carlo_risk(&point_robot(), &through, &[o], 20_000, 1).unwrap().estimate >= 0.5);
}

#[test]
fn two_sigma_point_pair_sits_below_its_certificate() {
    let sigma = 0.1;
    let o = UncertainObstacle::new(
        "p",
        ConvexBody::sphere(Vec3::new(2.0 * sigma, 0.0, 0.0), 1e-4).unwrap(),
        Covariance::isotropic(2, sigma).unwrap(),
    );
    let theta = q(&[0.0, 0.0]);
    let mc = monte_carlo_risk(&point_robot(), &[theta.clone()], &[o.clone()], 100_000, 11).unwrap();
    let cert = certify_risk(&point_robot(), &theta, &o, 1e-6).unwrap();
    assert!((cert.eps1 - (-2.0f64).exp()).abs() < 1e-3);
    assert!(mc.estimate < 0.01);
    assert!(mc.estimate <= cert.eps_prime);
}

#[test]
fn containment_of_shadows() {
    let o = UncertainObstacle::new(
        "box",
        ConvexBody::cuboid(Vec3::new(0.2, 0.1, 0.0)).unwrap(),
        Covariance::from_row_major(2, &[0.02, 0.005, 0.005, 0.01]).unwrap(),
    );
    let n = 20_000;
    let s = shadow(&o, 0.5).unwrap();
    let r = monte_carlo_containment(&o, &s, n, 5).unwrap();
    assert!((r.estimate - 0.5).abs() <= 3.0 * r.standard_error, "{r:?}");
    assert_eq!(r.directions, Some(CONTAINMENT_DIRECTIONS_2D + 1));
    let huge = ConvexBody::sphere(Vec3::zeros(), 100.0).unwrap();
    assert_eq!(monte_carlo_containment(&o, &huge, 2000, 5).unwrap().estimate, 1.0);
    assert_eq!(monte_carlo_containment(&o, &o.nominal, 2000, 5).unwrap().estimate, 0.0);
}

#[test]
fn direction_sets() {
    for dim in [2, 3] {
        let dirs = containment_directions(dim);
        let want = if dim == 2 { CONTAINMENT_DIRECTIONS_2D } else { CONTAINMENT_DIRECTIONS_3D };
        assert_eq!(dirs.len(), want);
        assert!(dirs.iter().all(|d| (d.norm() - 1.0).abs() < 1e-12));
        // every direction in the span lies within 0.5 rad of the set
        for k in 0..200 {
            let a = k as f64 * 0.731;
            let z = if dim == 2 { 0.0 } else { (k as f64 * 0.377).sin() };
            let r = (1.0 - z * z).sqrt();
            let u = Vec3::new(r * a.cos(), r * a.sin(), z);
            assert!(dirs.iter().any(|d| d.dot(&u) > 0.5_f64.cos()));
        }
    }
}

fn blocked() -> TrajectoryProblem {
    let o = disk(Vec3::new(0.0, 0.02, 0.0), 0.15, 0.05);
    let robot = RobotModel::planar_point(0.05, 5.0).unwrap();
    TrajectoryProblem::new(robot, vec![o], 8, q(&[-1.0, 0.0]), q(&[1.0, 0.0]), 0.01, 0.02).unwrap()
}

#[test]
fn risk_blind_clears_nominal_geometry() {
    let p = blocked();
    let r = risk_blind_plan(&p, &ScoConfig::default()).unwrap();
    assert_eq!(r.status, PlanStatus::Converged);
    let report = evaluate_constraints(&p, &r.trajectory, &r.allocation, 1e-6).unwrap();
    for row in &report.signed_distances[1..7] {
        assert!(row[0] >= p.margin - 1e-4, "{row:?}");
    }
    let free = TrajectoryProblem { obstacles: vec![], ..p };
    let r = risk_blind_plan(&free, &ScoConfig::default()).unwrap();
    assert!((r.objective - 4.0 / 7.0).abs() < 1e-9);
}

#[test]
fn ira_stops_once_the_sampled_risk_fits() {
    let p = TrajectoryProblem {
        budget: 0.5,
        ..blocked()
    };
    let r = ira_plan(&p, &ScoConfig::default(), 2000, 10, 3).unwrap();
    let mc = monte_carlo_risk(&p.robot, &r.trajectory, &p.obstacles, 2000, 4).unwrap();
    assert!(mc.estimate <= 0.5);
    let free = TrajectoryProblem { obstacles: vec![], ..p };
    let r = ira_plan(&free, &ScoConfig::default(), 100, 3, 3).unwrap();
    assert!((r.objective - 4.0 / 7.0).abs() < 1e-9);
}
