//! Serial-chain robots: forward kinematics and positional point Jacobians.
//!
//! Link `i` is the body moved by joint `i`. Its frame is
//! `parent · origin_i · motion_i(θ_i)`, with the base pose as the root parent.

use nalgebra::{DVector, Matrix3xX, Translation3, UnitQuaternion, Unit};

use crate::error::{Error, Result};
use crate::geometry::{ConvexBody, Pose, Vec3};

pub type JointState = DVector<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Revolute,
    Prismatic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    /// Unit axis in the joint frame.
    pub axis: Vec3,
    /// Joint frame relative to the parent link frame.
    pub origin: Pose,
    pub lower: f64,
    pub upper: f64,
}

impl Joint {
    pub fn new(
        name: impl Into<String>,
        kind: JointKind,
        axis: Vec3,
        origin: Pose,
        lower: f64,
        upper: f64,
    ) -> Result<Self> {
        let name = name.into();
        if !((axis.norm() - 1.0).abs() <= 1e-9) {
            return Err(Error::domain(format!("joint {name}: axis must be unit length")));
        }
        if !(lower <= upper) {
            return Err(Error::domain(format!(
                "joint {name}: lower limit {lower} exceeds upper limit {upper}"
            )));
        }
        Ok(Self {
            name,
            kind,
            axis,
            origin,
            lower,
            upper,
        })
    }

    fn motion(&self, q: f64) -> Pose {
        match self.kind {
            JointKind::Revolute => Pose::from_parts(
                Translation3::identity(),
                UnitQuaternion::from_axis_angle(&Unit::new_unchecked(self.axis), q),
            ),
            JointKind::Prismatic => Pose::from_parts(
                Translation3::from(self.axis * q),
                UnitQuaternion::identity(),
            ),
        }
    }
}

/// Collision shapes of one link, in the link frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Link {
    pub shapes: Vec<ConvexBody>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub base: Pose,
    joints: Vec<Joint>,
    links: Vec<Link>,
}

/// A collision shape posed in the world, tagged with its link.
#[derive(Debug, Clone)]
pub struct PosedShape {
    pub link: usize,
    pub body: ConvexBody,
}

/// World-frame data of every joint at one configuration.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub link_poses: Vec<Pose>,
    pub joint_origins: Vec<Vec3>,
    pub joint_axes: Vec<Vec3>,
}

impl RobotModel {
    pub fn new(name: impl Into<String>, base: Pose, joints: Vec<Joint>, links: Vec<Link>) -> Result<Self> {
        if joints.len() != links.len() {
            return Err(Error::domain(format!(
                "robot has {} joints but {} links",
                joints.len(),
                links.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            base,
            joints,
            links,
        })
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn lower_limits(&self) -> JointState {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.lower))
    }

    pub fn upper_limits(&self) -> JointState {
        DVector::from_iterator(self.dof(), self.joints.iter().map(|j| j.upper))
    }

    fn check_state(&self, theta: &JointState) -> Result<()> {
        if theta.len() != self.dof() {
            return Err(Error::domain(format!(
                "joint state has {} entries, robot has {} joints",
                theta.len(),
                self.dof()
            )));
        }
        if theta.iter().any(|q| !q.is_finite()) {
            return Err(Error::domain("joint state must be finite"));
        }
        Ok(())
    }

    pub fn chain_state(&self, theta: &JointState) -> Result<ChainState> {
        self.check_state(theta)?;
        let n = self.dof();
        let mut link_poses = Vec::with_capacity(n);
        let mut joint_origins = Vec::with_capacity(n);
        let mut joint_axes = Vec::with_capacity(n);
        let mut parent = self.base;
        for (joint, q) in self.joints.iter().zip(theta.iter()) {
            let frame = parent * joint.origin;
            joint_origins.push(frame.translation.vector);
            joint_axes.push(frame.rotation * joint.axis);
            let link = frame * joint.motion(*q);
            link_poses.push(link);
            parent = link;
        }
        Ok(ChainState {
            link_poses,
            joint_origins,
            joint_axes,
        })
    }

    /// Collision shapes of every link placed at configuration `theta`.
    pub fn posed_shapes(&self, theta: &JointState) -> Result<Vec<PosedShape>> {
        let poses = forward_kinematics(self, theta)?;
        Ok(self
            .links
            .iter()
            .zip(poses.iter())
            .enumerate()
            .flat_map(|(i, (link, pose))| {
                link.shapes.iter().map(move |s| PosedShape {
                    link: i,
                    body: ConvexBody::posed(*pose, s.clone()),
                })
            })
            .collect())
    }

    /// A planar point (or disk) robot: prismatic x and y joints, with a
    /// sphere of `radius` on the second link.
    pub fn planar_point(radius: f64, limit: f64) -> Result<Self> {
        let jx = Joint::new("x", JointKind::Prismatic, Vec3::x(), Pose::identity(), -limit, limit)?;
        let jy = Joint::new("y", JointKind::Prismatic, Vec3::y(), Pose::identity(), -limit, limit)?;
        let links = vec![
            Link::default(),
            Link {
                shapes: vec![ConvexBody::sphere(Vec3::zeros(), radius)?],
            },
        ];
        Self::new("planar-point", Pose::identity(), vec![jx, jy], links)
    }
}

/// World pose of every link frame.
pub fn forward_kinematics(robot: &RobotModel, theta: &JointState) -> Result<Vec<Pose>> {
    Ok(robot.chain_state(theta)?.link_poses)
}

/// Positional Jacobian (3 × dof) of a point rigidly attached to `link`.
pub fn point_jacobian(
    robot: &RobotModel,
    theta: &JointState,
    link: usize,
    world_point: &Vec3,
) -> Result<Matrix3xX<f64>> {
    let chain = robot.chain_state(theta)?;
    jacobian_from_chain(robot, &chain, link, world_point)
}

pub fn jacobian_from_chain(
    robot: &RobotModel,
    chain: &ChainState,
    link: usize,
    world_point: &Vec3,
) -> Result<Matrix3xX<f64>> {
    if link >= robot.dof() {
        return Err(Error::domain(format!(
            "link index {link} out of range for {} links",
            robot.dof()
        )));
    }
    let mut jac = Matrix3xX::zeros(robot.dof());
    for j in 0..=link {
        let axis = chain.joint_axes[j];
        let col = match robot.joints[j].kind {
            JointKind::Revolute => axis.cross(&(world_point - chain.joint_origins[j])),
            JointKind::Prismatic => axis,
        };
        jac.set_column(j, &col);
    }
    Ok(jac)
}
