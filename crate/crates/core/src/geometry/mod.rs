//! Convex geometry through support mappings.
//!
//! Every body answers "farthest point along v". Minkowski sums, posed
//! bodies and ε-shadows are compositions of support mappings, so nothing is
//! ever tessellated; GJK and EPA only ever query supports.

mod body;
mod epa;
mod gjk;

pub use body::{ConvexBody, Covariance, Ellipsoid, HalfEllipsoid};
pub use epa::{EPA_FACE_TOLERANCE, EPA_MAX_FACES};
pub(crate) use gjk::distance_estimate;
pub use gjk::{distance, intersects, DistanceResult, GJK_MAX_ITERATIONS, GJK_RELATIVE_TOLERANCE};

/// Points and vectors share one type; the workspace is always embedded in 3D
/// and planar scenes keep z = 0.
pub type Vec3 = nalgebra::Vector3<f64>;

/// Rigid transform (rotation + translation).
pub type Pose = nalgebra::Isometry3<f64>;

/// Builds a pose from a translation and roll/pitch/yaw angles (radians).
pub fn pose_from_xyz_rpy(xyz: Vec3, rpy: Vec3) -> Pose {
    Pose::from_parts(
        nalgebra::Translation3::from(xyz),
        nalgebra::UnitQuaternion::from_euler_angles(rpy.x, rpy.y, rpy.z),
    )
}
