//! JSON scene and robot files.
//!
//! Both carry a top-level `formatVersion`; unknown fields are rejected. A
//! path of the form `builtin:<name>` names one of the bundled assets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::geometry::{pose_from_xyz_rpy, ConvexBody, Covariance, Pose, Vec3};
use crate::kinematics::{Joint, JointKind, JointState, Link, RobotModel};
use crate::risk::UncertainObstacle;

pub const FORMAT_VERSION: u32 = 1;

const BUILTIN_SCENES: &[(&str, &str)] = &[
    ("corridor", include_str!("../../assets/corridor.scene.json")),
    ("gap", include_str!("../../assets/gap.scene.json")),
    ("pick-place", include_str!("../../assets/pick_place.scene.json")),
];

const BUILTIN_ROBOTS: &[(&str, &str)] = &[
    ("point", include_str!("../../assets/point.robot.json")),
    ("disk", include_str!("../../assets/disk.robot.json")),
    ("arm4", include_str!("../../assets/arm4.robot.json")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase", deny_unknown_fields)]
pub enum ShapeSpec {
    Sphere {
        radius: f64,
    },
    #[serde(rename_all = "camelCase")]
    Box {
        half_extents: Vec<f64>,
    },
    ConvexHull {
        vertices: Vec<Vec<f64>>,
    },
    Capsule {
        a: Vec<f64>,
        b: Vec<f64>,
        radius: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    #[serde(default)]
    pub xyz: Option<Vec<f64>>,
    /// Roll, pitch, yaw (rad).
    #[serde(default)]
    pub rpy: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub name: String,
    pub shape: ShapeSpec,
    #[serde(default)]
    pub pose: PoseSpec,
    /// n×n row-major.
    pub covariance: Vec<f64>,
}

/// Default planning request carried by a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TaskSpec {
    pub robot: String,
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
    pub timesteps: usize,
    pub delta: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SceneFile {
    pub format_version: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub dimension: usize,
    pub obstacles: Vec<ObstacleSpec>,
    #[serde(default)]
    pub task: Option<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: JointKindSpec,
    pub axis: [f64; 3],
    #[serde(default)]
    pub origin: PoseSpec,
    pub limits: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum JointKindSpec {
    Revolute,
    Prismatic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkShapeSpec {
    pub shape: ShapeSpec,
    #[serde(default)]
    pub pose: PoseSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    #[serde(default)]
    pub shapes: Vec<LinkShapeSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RobotFile {
    pub format_version: u32,
    pub name: String,
    #[serde(default)]
    pub base: PoseSpec,
    pub joints: Vec<JointSpec>,
    pub links: Vec<LinkSpec>,
}

/// A parsed scene with its obstacles built.
#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub dimension: usize,
    pub obstacles: Vec<UncertainObstacle>,
    pub task: Option<TaskSpec>,
    /// Directory that relative paths inside the file resolve against.
    pub base_dir: Option<PathBuf>,
}

fn builtin<'a>(table: &'a [(&str, &str)], name: &str, what: &str) -> Result<&'a str, CliError> {
    table.iter().find(|(n, _)| *n == name).map(|(_, s)| *s).ok_or_else(|| {
        let known: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
        CliError::Input(format!("unknown builtin {what} '{name}' (known: {})", known.join(", ")))
    })
}

/// Text and base directory of a file or builtin asset.
fn read_source(spec: &str, table: &[(&str, &str)], what: &str) -> Result<(String, Option<PathBuf>), CliError> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        return Ok((builtin(table, name, what)?.to_string(), None));
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{what} file {spec}: {e}")))?;
    Ok((text, path.parent().map(Path::to_path_buf)))
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, origin: &str) -> Result<T, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Input(format!("{origin}: {e}")))
}

fn check_version(v: u32, origin: &str) -> Result<(), CliError> {
    if v != FORMAT_VERSION {
        return Err(CliError::Input(format!(
            "{origin}: formatVersion {v} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

fn vector(v: &[f64], dim: usize, field: &str) -> Result<Vec3, String> {
    if v.len() != dim && v.len() != 3 {
        return Err(format!("{field} needs {dim} entries, got {}", v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(format!("{field} must be finite"));
    }
    let mut out = Vec3::zeros();
    for (k, x) in v.iter().enumerate() {
        out[k] = *x;
    }
    if dim == 2 && out.z != 0.0 {
        return Err(format!("{field} must have z = 0 in a planar scene"));
    }
    Ok(out)
}

fn pose(spec: &PoseSpec, dim: usize, field: &str) -> Result<Pose, String> {
    let xyz = match &spec.xyz {
        Some(v) => vector(v, dim, &format!("{field}.xyz"))?,
        None => Vec3::zeros(),
    };
    let rpy = match &spec.rpy {
        Some(v) if v.len() == 3 && v.iter().all(|x| x.is_finite()) => Vec3::new(v[0], v[1], v[2]),
        Some(_) => return Err(format!("{field}.rpy needs 3 finite entries")),
        None => Vec3::zeros(),
    };
    if dim == 2 && (rpy.x != 0.0 || rpy.y != 0.0) {
        return Err(format!("{field}.rpy may only rotate about z in a planar scene"));
    }
    Ok(pose_from_xyz_rpy(xyz, rpy))
}

fn shape(spec: &ShapeSpec, dim: usize, field: &str) -> Result<ConvexBody, String> {
    let built = match spec {
        ShapeSpec::Sphere { radius } => ConvexBody::sphere(Vec3::zeros(), *radius),
        ShapeSpec::Box { half_extents } => {
            let h = vector(half_extents, dim, &format!("{field}.halfExtents"))?;
            ConvexBody::cuboid(h)
        }
        ShapeSpec::ConvexHull { vertices } => {
            let pts = vertices
                .iter()
                .enumerate()
                .map(|(i, v)| vector(v, dim, &format!("{field}.vertices[{i}]")))
                .collect::<Result<Vec<_>, _>>()?;
            ConvexBody::polytope(pts)
        }
        ShapeSpec::Capsule { a, b, radius } => {
            let a = vector(a, dim, &format!("{field}.a"))?;
            let b = vector(b, dim, &format!("{field}.b"))?;
            ConvexBody::capsule(a, b, *radius)
        }
    };
    built.map_err(|e| format!("{field}: {e}"))
}

impl SceneFile {
    pub fn build(&self, base_dir: Option<PathBuf>) -> Result<Scene, CliError> {
        check_version(self.format_version, "scene")?;
        let dim = self.dimension;
        if dim != 2 && dim != 3 {
            return Err(CliError::Input(format!("scene dimension must be 2 or 3, got {dim}")));
        }
        let obstacles = self
            .obstacles
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let field = format!("obstacles[{i}] '{}'", o.name);
                let inner = || -> Result<UncertainObstacle, String> {
                    let body = shape(&o.shape, dim, "shape")?;
                    let pose = pose(&o.pose, dim, "pose")?;
                    let covariance = Covariance::from_row_major(dim, &o.covariance).map_err(|e| format!("covariance: {e}"))?;
                    Ok(UncertainObstacle::new(o.name.clone(), ConvexBody::posed(pose, body), covariance))
                };
                inner().map_err(|e| CliError::Input(format!("{field}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Scene {
            name: self.name.clone().unwrap_or_else(|| "scene".into()),
            dimension: dim,
            obstacles,
            task: self.task.clone(),
            base_dir,
        })
    }
}

impl RobotFile {
    pub fn build(&self) -> Result<RobotModel, CliError> {
        check_version(self.format_version, "robot")?;
        let err = |field: String| move |e: String| CliError::Input(format!("robot {field}: {e}"));
        let base = pose(&self.base, 3, "base").map_err(err("base".into()))?;
        let joints = self
            .joints
            .iter()
            .enumerate()
            .map(|(i, j)| {
                let field = format!("joints[{i}] '{}'", j.name);
                let origin = pose(&j.origin, 3, "origin").map_err(err(field.clone()))?;
                let kind = match j.kind {
                    JointKindSpec::Revolute => JointKind::Revolute,
                    JointKindSpec::Prismatic => JointKind::Prismatic,
                };
                let axis = Vec3::new(j.axis[0], j.axis[1], j.axis[2]);
                Joint::new(j.name.clone(), kind, axis, origin, j.limits[0], j.limits[1])
                    .map_err(|e| CliError::Input(format!("robot {field}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let links = self
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let shapes = l
                    .shapes
                    .iter()
                    .enumerate()
                    .map(|(k, s)| {
                        let field = format!("links[{i}].shapes[{k}]");
                        let body = shape(&s.shape, 3, "shape").map_err(err(field.clone()))?;
                        let p = pose(&s.pose, 3, "pose").map_err(err(field))?;
                        Ok(ConvexBody::posed(p, body))
                    })
                    .collect::<Result<Vec<_>, CliError>>()?;
                Ok(Link { shapes })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        RobotModel::new(self.name.clone(), base, joints, links).map_err(|e| CliError::Input(format!("robot: {e}")))
    }
}

pub fn load_scene(spec: &str) -> Result<Scene, CliError> {
    let (text, dir) = read_source(spec, BUILTIN_SCENES, "scene")?;
    parse_json::<SceneFile>(&text, spec)?.build(dir)
}

/// Loads a robot; relative paths resolve against `base_dir` when given.
pub fn load_robot(spec: &str, base_dir: Option<&Path>) -> Result<RobotModel, CliError> {
    let resolved = match base_dir {
        Some(dir) if !spec.starts_with("builtin:") && Path::new(spec).is_relative() => {
            dir.join(spec).to_string_lossy().into_owned()
        }
        _ => spec.to_string(),
    };
    let (text, _) = read_source(&resolved, BUILTIN_ROBOTS, "robot")?;
    parse_json::<RobotFile>(&text, &resolved)?.build()
}

/// Joint vector with a length check against the robot.
pub fn joint_vector(values: &[f64], robot: &RobotModel, what: &str) -> Result<JointState, CliError> {
    if values.len() != robot.dof() {
        return Err(CliError::Input(format!(
            "{what} has {} entries but robot '{}' has {} joints",
            values.len(),
            robot.name,
            robot.dof()
        )));
    }
    Ok(JointState::from_column_slice(values))
}

/// Trajectory CSV as written by `plan`: a `t` column followed by one column
/// per joint.
pub fn read_trajectory(path: &Path, robot: &RobotModel) -> Result<Vec<JointState>, CliError> {
    let origin = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Input(format!("{origin}: {e}")))?;
    let headers = reader.headers().map_err(|e| CliError::Input(format!("{origin}: {e}")))?.clone();
    if headers.len() != robot.dof() + 1 {
        return Err(CliError::Input(format!(
            "{origin}: {} joint columns but robot '{}' has {} joints",
            headers.len().saturating_sub(1),
            robot.name,
            robot.dof()
        )));
    }
    let mut traj = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Input(format!("{origin}: {e}")))?;
        let values = record
            .iter()
            .skip(1)
            .enumerate()
            .map(|(k, f)| {
                f.trim().parse::<f64>().map_err(|e| {
                    CliError::Input(format!("{origin}: line {}, column {}: {e}", row + 2, headers.get(k + 1).unwrap_or("?")))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        traj.push(JointState::from_vec(values));
    }
    if traj.is_empty() {
        return Err(CliError::Input(format!("{origin}: no trajectory rows")));
    }
    Ok(traj)
}
