//! CSV, JSON and SVG artifacts.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use serde::Serialize;

use super::CliError;
use crate::geometry::{ConvexBody, Vec3};
use crate::kinematics::{JointState, RobotModel};
use crate::risk::UncertainObstacle;

/// Directions used to trace projected outlines.
const OUTLINE_POINTS: usize = 72;
const SVG_SIZE: f64 = 640.0;
const PALETTE: [&str; 6] = ["#c0392b", "#2471a3", "#7d3c98", "#b9770e", "#148f77", "#566573"];

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_error(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_rows(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    w.write_record(header).map_err(|e| io_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

/// `t` followed by one column per joint; values use shortest round-trip
/// formatting so re-reading reproduces them exactly.
pub fn write_trajectory(path: &Path, robot: &RobotModel, traj: &[JointState]) -> Result<(), CliError> {
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain(robot.joints().iter().map(|j| j.name.clone()))
        .collect();
    let rows = traj
        .iter()
        .enumerate()
        .map(|(t, q)| std::iter::once(t.to_string()).chain(q.iter().map(|x| x.to_string())).collect());
    write_rows(path, &header, rows)
}

pub fn write_allocation(path: &Path, allocation: &[f64], risks: &[f64]) -> Result<(), CliError> {
    let header = ["t", "delta", "certified_risk"].map(String::from);
    let rows = allocation
        .iter()
        .zip(risks)
        .enumerate()
        .map(|(t, (d, r))| vec![t.to_string(), d.to_string(), r.to_string()]);
    write_rows(path, &header, rows)
}

pub fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

fn outline(body: &ConvexBody) -> Vec<Vector2<f64>> {
    (0..OUTLINE_POINTS)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / OUTLINE_POINTS as f64;
            let p = body.support(&Vec3::new(a.cos(), a.sin(), 0.0)).unwrap_or_else(|_| body.interior_point());
            Vector2::new(p.x, p.y)
        })
        .collect()
}

/// k-σ ellipse of the xy marginal of Σ around `center`.
fn ellipse(center: Vector2<f64>, cov: Matrix2<f64>, k: f64) -> Option<(Vector2<f64>, f64, f64, f64)> {
    let eig = SymmetricEigen::new(cov);
    let (i, j) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let (major, minor) = (eig.eigenvalues[i], eig.eigenvalues[j]);
    if !(minor > 0.0) {
        return None;
    }
    let axis = eig.eigenvectors.column(i);
    let angle = axis[1].atan2(axis[0]).to_degrees();
    Some((center, k * major.sqrt(), k * minor.sqrt(), angle))
}

struct Frame {
    min: Vector2<f64>,
    scale: f64,
    height: f64,
}

impl Frame {
    fn fit(points: &[Vector2<f64>]) -> Self {
        let mut min = Vector2::repeat(f64::INFINITY);
        let mut max = Vector2::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        if !min.x.is_finite() {
            min = Vector2::repeat(-1.0);
            max = Vector2::repeat(1.0);
        }
        let span = (max - min).amax().max(1e-3);
        let pad = 0.08 * span;
        min -= Vector2::repeat(pad);
        max += Vector2::repeat(pad);
        let scale = SVG_SIZE / (max - min).amax();
        Self {
            min,
            scale,
            height: (max.y - min.y) * scale,
        }
    }

    fn map(&self, p: &Vector2<f64>) -> (f64, f64) {
        ((p.x - self.min.x) * self.scale, self.height - (p.y - self.min.y) * self.scale)
    }

    fn polygon(&self, pts: &[Vector2<f64>]) -> String {
        pts.iter()
            .map(|p| {
                let (x, y) = self.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Overhead (xy) plot: nominal obstacles with 1σ/2σ/3σ ellipses, the robot
/// outline at every waypoint, and the path of its last shape.
pub fn render_svg(
    title: &str,
    robot: &RobotModel,
    obstacles: &[UncertainObstacle],
    traj: &[JointState],
) -> Result<String, CliError> {
    let obstacle_outlines: Vec<Vec<Vector2<f64>>> = obstacles.iter().map(|o| outline(&o.nominal)).collect();
    let mut robot_outlines = Vec::new();
    let mut path = Vec::new();
    for q in traj {
        let shapes = robot.posed_shapes(q)?;
        if let Some(last) = shapes.last() {
            let c = last.body.interior_point();
            path.push(Vector2::new(c.x, c.y));
        }
        robot_outlines.extend(shapes.iter().map(|s| outline(&s.body)));
    }
    let ellipses: Vec<Vec<(Vector2<f64>, f64, f64, f64)>> = obstacles
        .iter()
        .map(|o| {
            let m = o.covariance.matrix();
            let cov = Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
            let c = o.nominal.interior_point();
            (1..=3).filter_map(|k| ellipse(Vector2::new(c.x, c.y), cov, k as f64)).collect()
        })
        .collect();

    let mut extent: Vec<Vector2<f64>> = obstacle_outlines.iter().chain(&robot_outlines).flatten().copied().collect();
    for (center, a, _, _) in ellipses.iter().flatten() {
        extent.push(center + Vector2::repeat(*a));
        extent.push(center - Vector2::repeat(*a));
    }
    let frame = Frame::fit(&extent);

    let mut svg = String::new();
    let h = frame.height;
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE:.0}" height="{h:.0}" viewBox="0 0 {SVG_SIZE:.0} {h:.0}">"#
    );
    let _ = writeln!(svg, "<title>{}</title>", escape(title));
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    for (i, o) in obstacles.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, r#"<g id="obstacle-{i}"><title>{}</title>"#, escape(&o.name));
        for (k, (center, a, b, angle)) in ellipses[i].iter().enumerate() {
            let (x, y) = frame.map(center);
            let _ = writeln!(
                svg,
                r#"<ellipse cx="{x:.2}" cy="{y:.2}" rx="{:.2}" ry="{:.2}" transform="rotate({:.3} {x:.2} {y:.2})" fill="none" stroke="{colour}" stroke-opacity="{:.2}" stroke-dasharray="4 3"/>"#,
                a * frame.scale,
                b * frame.scale,
                -angle,
                0.8 - 0.2 * k as f64
            );
        }
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{colour}" fill-opacity="0.35" stroke="{colour}"/>"#,
            frame.polygon(&obstacle_outlines[i])
        );
        let _ = writeln!(svg, "</g>");
    }
    let _ = writeln!(svg, r#"<g id="robot">"#);
    for o in &robot_outlines {
        let _ = writeln!(
            svg,
            r##"<polygon points="{}" fill="none" stroke="#2c3e50" stroke-opacity="0.3"/>"##,
            frame.polygon(o)
        );
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r##"<polyline id="path" points="{}" fill="none" stroke="#111111" stroke-width="1.5"/>"##,
        frame.polygon(&path)
    );
    for p in &path {
        let (x, y) = frame.map(p);
        let _ = writeln!(svg, r##"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="#111111"/>"##);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
